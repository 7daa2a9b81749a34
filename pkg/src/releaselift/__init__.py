"""Causal lift estimation for software releases from usage panels.

Users upgrade to new releases on their own schedule; the fast movers
are systematically different from the slow ones, so raw before/after
comparisons overstate what a release did.  This package fits per-user
mixed-effects response models with waiting-time controls, rewrites each
adopter's usage history as if the release had not shipped, and reports
the ratio of predicted-counterfactual to observed response over the
release's lifetime (1 = no effect, below 1 = the release helped).

Import surface is lazy so the command line can pin BLAS threading
before any numeric library loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # errors
    "ReleaseLiftError": "errors", "ConfigError": "errors", "DataError": "errors",
    "SchemaError": "errors", "NumericalError": "errors", "SpdError": "errors",
    "IdentifiabilityError": "errors",
    # panel
    "StudyWindow": "panel", "UserRecord": "panel", "Panel": "panel",
    "TreatmentAssignment": "panel", "ingest_csv": "panel", "export_csv": "panel",
    "assign_treatment": "panel", "save_panel": "panel", "load_panel": "panel",
    "build_user_record": "panel", "rolling_average": "panel",
    "content_hash": "panel",
    # design
    "ColumnSchema": "design", "DesignPair": "design", "build_design": "design",
    "build_counterfactual": "design", "collinearity_diagnostic": "design",
    "slice_designs": "design", "waiting_age_matrix": "design",
    # models
    "Hyperparams": "models", "GibbsPlan": "models", "PosteriorSummary": "models",
    "fit_hierarchical": "models", "fit_flat": "models", "resume_fit": "models",
    "save_posterior": "models", "load_posterior": "models",
    # counterfactual
    "CcrReport": "counterfactual", "simulate_cf_bands": "counterfactual",
    "predict_cf_point": "counterfactual", "null_ccr": "counterfactual",
    # diagnostics
    "treated_rmse": "diagnostics", "kfold_cv": "diagnostics",
    "overlap_check": "diagnostics", "adopter_curves": "diagnostics",
    "OverlapResult": "diagnostics", "AdopterCurves": "diagnostics",
    "FoldCcr": "diagnostics", "KfoldResult": "diagnostics",
    "fold_assignments": "diagnostics",
    "ValidationReport": "diagnostics",
    # synth
    "GeneratorSpec": "synth", "GroundTruth": "synth", "generate": "synth",
    "verify_assumptions": "synth", "AssumptionReport": "synth",
    # samplers
    "RngStream": "samplers", "SufficientStats": "samplers",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    return getattr(import_module(f".{module}", __name__), name)


def __dir__():
    return __all__

"""Command-line entry points.

Four subcommands cover the full workflow::

    releaselift simulate        synthesize a panel with known ground truth
    releaselift fit             fit a response model to a panel CSV
    releaselift counterfactual  estimate a release's lift ratio + figures
    releaselift validate        fit quality / identification diagnostics

Exit codes: 0 ok, 2 configuration problem, 3 data problem, 4 numerical
failure.

Results are bit-identical for a given seed regardless of ``--threads``:
threaded BLAS reductions reorder floating-point sums, so the numeric
kernels are pinned to one BLAS thread before the numeric stack loads
(which is why every heavy import lives inside a command body), and the
requested thread count is only recorded in output provenance.

Output files never embed timestamps, so identical inputs give identical
bytes.  Reports embed the resolved options and a content hash of the
input panel instead.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from .errors import ConfigError, ReleaseLiftError

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

for _var in _BLAS_VARS:
    os.environ[_var] = "1"

_MODEL_CHOICES = ("flat", "hier", "hier-dp")


def _check_threads(ctx, param, value):
    if value is not None and value < 1:
        raise click.BadParameter("must be >= 1")
    return value


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--threads", type=int, default=None, callback=_check_threads,
              expose_value=True,
              help="Requested worker count; recorded in outputs. Results "
                   "never depend on it.")
@click.pass_context
def cli(ctx, threads):
    """Estimate the causal effect of software releases on user response
    from longitudinal usage panels."""
    ctx.obj = {"threads": threads}


def _out_dir(output) -> Path:
    root = output or os.environ.get("RELEASELIFT_OUTPUT") or "."
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _threads() -> int | None:
    ctx = click.get_current_context(silent=True)
    obj = getattr(ctx, "obj", None) if ctx else None
    return obj.get("threads") if isinstance(obj, dict) else None


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_window(schedule_path, input_path):
    from .panel import StudyWindow

    if schedule_path is None:
        candidate = Path(input_path).parent / "schedule.json"
        if not candidate.exists():
            raise ConfigError(
                "no study window: pass --schedule or keep schedule.json "
                "beside the panel CSV"
            )
        schedule_path = candidate
    try:
        raw = json.loads(Path(schedule_path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read study window from {schedule_path}: {exc}") from exc
    return StudyWindow.from_json_dict(raw)


def _parse_week_range(text):
    if text is None:
        return None
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"--week-range expects LO:HI, got {text!r}") from None
    if lo > hi:
        raise ConfigError(f"--week-range {text!r} is empty")
    return lo, hi


# ---------------------------------------------------------------------------
# simulate

_TUPLE_FIELDS = (
    "release_schedule", "legacy_versions", "ar_coefs", "waiting_decay",
    "adoption_hazard", "activity_prob", "error_offsets", "mu_star", "sigma_star",
)


@cli.command()
@click.option("--seed", type=int, default=None, help="Generator seed.")
@click.option("--users", type=int, default=None, help="Number of users.")
@click.option("--weeks", type=int, default=None, help="Window length in weeks.")
@click.option("--effect", "effects", multiple=True, metavar="VERSION=FACTOR",
              help="Planted multiplicative effect, e.g. v9=1.1. Repeatable.")
@click.option("--adopter-link", type=float, default=None,
              help="Correlation in [-1,1] between activity and adoption "
                   "speed; 0 removes the early-adopter confound.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON file of generator fields; explicit flags win.")
@click.option("--output", "-o", default=None,
              help="Output directory (default: $RELEASELIFT_OUTPUT or cwd).")
def simulate(seed, users, weeks, effects, adopter_link, config_path, output):
    """Generate a synthetic usage panel with known ground truth.

    Writes panel.csv, schedule.json and truth.json.
    """
    import dataclasses

    from .panel import content_hash, export_csv
    from .synth import GeneratorSpec, generate

    cfg = {}
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except ValueError as exc:
            raise ConfigError(f"bad --config JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("--config must hold a JSON object")
    for key, val in (("seed", seed), ("n_users", users), ("n_weeks", weeks),
                     ("early_adopter_link", adopter_link)):
        if val is not None:
            cfg[key] = val
    if effects:
        planted = dict(cfg.get("planted_effects", {}))
        for item in effects:
            version, sep, factor = item.partition("=")
            if not sep:
                raise ConfigError(f"--effect expects VERSION=FACTOR, got {item!r}")
            try:
                planted[version] = float(factor)
            except ValueError:
                raise ConfigError(f"--effect factor must be a number, got {factor!r}") from None
        cfg["planted_effects"] = planted
    for name in _TUPLE_FIELDS:
        if isinstance(cfg.get(name), list):
            cfg[name] = tuple(
                tuple(x) if isinstance(x, list) else x for x in cfg[name]
            )
    try:
        spec = GeneratorSpec(**cfg)
    except TypeError as exc:
        raise ConfigError(f"unknown generator field: {exc}") from exc

    panel, truth = generate(spec)
    out = _out_dir(output)
    export_csv(panel, out / "panel.csv")
    _write_json(out / "schedule.json", panel.window.to_json_dict())
    _write_json(out / "truth.json", truth.to_json_dict())
    _write_json(out / "manifest.json", {
        "command": "simulate",
        "config": dataclasses.asdict(spec),
        "threads": _threads(),
        "outputs": {
            name: content_hash(out / name)
            for name in ("panel.csv", "schedule.json", "truth.json")
        },
    })
    click.echo(f"wrote {out / 'panel.csv'} ({len(panel.users)} users, "
               f"{panel.window.n_weeks} weeks)")


# ---------------------------------------------------------------------------
# fit

@cli.command()
@click.option("--input", "-i", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Panel CSV.")
@click.option("--schedule", "schedule_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Study window JSON (default: schedule.json beside the input).")
@click.option("--model", type=click.Choice(_MODEL_CHOICES), default="hier",
              show_default=True, help="Pooled, per-user, or per-user with "
                                      "clustered error offsets.")
@click.option("--ar-order", type=int, default=4, show_default=True,
              help="Number of lagged-response columns.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--burn-in", type=int, default=1000, show_default=True)
@click.option("--keep", type=int, default=2000, show_default=True)
@click.option("--thin", type=int, default=1, show_default=True)
@click.option("--week-range", default=None, metavar="LO:HI",
              help="Restrict fitted rows to these calendar weeks.")
@click.option("--drop-waiting", is_flag=True,
              help="Omit the adoption-delay flag block from the design "
                   "(reproduces the confounded specification).")
@click.option("--checkpoint-every", type=int, default=None,
              help="Write a resumable checkpoint every N sweeps.")
@click.option("--resume", is_flag=True,
              help="Continue from fit_checkpoint.pkl in the output directory.")
@click.option("--output", "-o", default=None)
def fit(input_path, schedule_path, model, ar_order, seed, burn_in, keep, thin,
        week_range, drop_waiting, checkpoint_every, resume, output):
    """Fit a response model to a panel CSV.

    Writes posterior.npz and fit.json.
    """
    from .design import ColumnSchema, build_design, slice_designs
    from .models import GibbsPlan, fit_flat, fit_hierarchical, resume_fit, save_posterior
    from .panel import content_hash, ingest_csv

    if ar_order < 0:
        raise ConfigError("--ar-order must be >= 0")
    window = _load_window(schedule_path, input_path)
    panel = ingest_csv(input_path, window)
    schema = ColumnSchema.for_window(window, ar_order,
                                     include_waiting=not drop_waiting)
    designs = build_design(panel, schema)
    rng_span = _parse_week_range(week_range)
    if rng_span is not None:
        designs = slice_designs(designs, rng_span)

    out = _out_dir(output)
    ckpt = out / "fit_checkpoint.pkl"
    plan = GibbsPlan(
        burn_in=burn_in, keep=keep, thin=thin,
        checkpoint_every=checkpoint_every,
        checkpoint_path=str(ckpt) if checkpoint_every else None,
    )
    if resume:
        if not ckpt.exists():
            raise ConfigError(f"--resume: no checkpoint at {ckpt}")
        post = resume_fit(ckpt, designs, schema)
    elif model == "flat":
        post = fit_flat(designs, schema, seed=seed, plan=plan)
    else:
        post = fit_hierarchical(
            designs, schema, seed=seed, plan=plan,
            error_model="dp_mixture" if model == "hier-dp" else "gaussian",
        )

    save_posterior(out / "posterior.npz", post,
                   window_dict=window.to_json_dict(), ar_order=ar_order,
                   include_waiting=not drop_waiting)
    _write_json(out / "fit.json", {
        "model": post.model,
        "n_users": len(post.user_ids),
        "weeks": [post.first_week, post.first_week + post.n_weeks - 1],
        "noise_variance": post.nu_bar,
        "seed": seed,
        "plan": {"burn_in": plan.burn_in, "keep": plan.keep, "thin": plan.thin},
        "ar_order": ar_order,
        "include_waiting": not drop_waiting,
        "threads": _threads(),
        "panel_sha1": content_hash(input_path),
    })
    click.echo(f"fitted {post.model} on {len(post.user_ids)} users; "
               f"wrote {out / 'posterior.npz'}")


# ---------------------------------------------------------------------------
# counterfactual

def _aligned_designs(panel, schema, post):
    from .design import build_design, slice_designs

    designs = build_design(panel, schema)
    lo = post.first_week
    hi = lo + post.n_weeks - 1
    if designs and (designs[0].first_week != lo or designs[0].n_rows != post.n_weeks):
        designs = slice_designs(designs, (lo, hi))
    return designs


def _posterior_context(posterior_path, input_path):
    from .design import ColumnSchema
    from .models import load_posterior
    from .panel import StudyWindow, ingest_csv

    post, meta = load_posterior(posterior_path)
    if not meta.get("window") or meta.get("ar_order") is None:
        raise ConfigError(
            "posterior archive lacks the study window; refit the model to "
            "produce a self-describing archive"
        )
    window = StudyWindow.from_json_dict(meta["window"])
    schema = ColumnSchema.for_window(
        window, int(meta["ar_order"]),
        include_waiting=bool(meta.get("include_waiting", True)),
    )
    panel = ingest_csv(input_path, window)
    return post, meta, window, schema, panel


@cli.command()
@click.option("--input", "-i", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Panel CSV.")
@click.option("--posterior", "posterior_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="posterior.npz from `fit`.")
@click.option("--cv-version", required=True, help="Release to evaluate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-sims", type=int, default=500, show_default=True,
              help="Simulations behind the uncertainty band.")
@click.option("--full-posterior", is_flag=True,
              help="Re-draw global parameters from the chain per simulation.")
@click.option("--null-window", type=int, default=6, show_default=True,
              help="Half-window (weeks) for the naive before/after ratio; "
                   "0 skips it.")
@click.option("--output", "-o", default=None)
def counterfactual(input_path, posterior_path, cv_version, seed, n_sims,
                   full_posterior, null_window, output):
    """Estimate a release's lift ratio.

    Writes ccr.json and ccr_weekly.csv plus rendered figures (observed
    vs counterfactual, weekly aggregate, adopter curves).
    """
    from . import plots
    from .counterfactual import null_ccr, simulate_cf_bands
    from .design import build_counterfactual
    from .diagnostics import adopter_curves
    from .panel import assign_treatment, content_hash

    post, meta, window, schema, panel = _posterior_context(posterior_path, input_path)
    ta = assign_treatment(panel, cv_version)
    designs = _aligned_designs(panel, schema, post)
    designs_cf = build_counterfactual(panel, schema, designs, ta)

    report = simulate_cf_bands(post, designs, designs_cf, ta, schema,
                               seed=seed, n_sims=n_sims,
                               full_posterior=full_posterior)
    provenance = {
        "command": "counterfactual",
        "cv_version": cv_version,
        "seed": seed,
        "n_sims": n_sims,
        "full_posterior": full_posterior,
        "model": post.model,
        "ar_order": int(meta["ar_order"]),
        "include_waiting": bool(meta.get("include_waiting", True)),
        "threads": _threads(),
        "panel_sha1": content_hash(input_path),
    }
    report.config = dict(report.config, **provenance)
    out = _out_dir(output)
    report.write_json(out / "ccr.json")
    report.write_csv(out / "ccr_weekly.csv")
    plots.ccr_figure(report, out / "ccr.png")
    plots.weekly_aggregate_figure(panel, out / "weekly_response.png")
    plots.adopter_curves_figure(adopter_curves(panel), window,
                                out / "adopter_curves.png")
    if null_window:
        base = null_ccr(panel, ta, half_window=null_window)
        base.config = dict(base.config, **provenance,
                           command_variant="null-ratio")
        base.write_json(out / "null_ccr.json")
    lo, hi = report.ccr_band
    click.echo(f"{cv_version}: ratio {report.ccr_mean:.4f} "
               f"[{lo:.4f}, {hi:.4f}] over weeks "
               f"{report.lifetime_weeks[0]}-{report.lifetime_weeks[-1]}")


# ---------------------------------------------------------------------------
# validate

@cli.command()
@click.option("--input", "-i", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Panel CSV.")
@click.option("--cv-version", required=True, help="Release to evaluate.")
@click.option("--posterior", "posterior_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Optional posterior.npz; enables fit-quality checks.")
@click.option("--schedule", "schedule_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Study window JSON (unneeded when --posterior is given).")
@click.option("--kfold", type=int, default=0, show_default=True,
              help="Hold out users in K folds and refit (0 skips).")
@click.option("--kfold-model", type=click.Choice(_MODEL_CHOICES), default="hier",
              show_default=True, help="Model refitted inside the folds.")
@click.option("--ar-order", type=int, default=4, show_default=True,
              help="Lag order for fold refits (when no posterior given, "
                   "also for the collinearity design).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", "-o", default=None)
def validate(input_path, cv_version, posterior_path, schedule_path, kfold,
             kfold_model, ar_order, seed, output):
    """Fit-quality and identification diagnostics.

    Writes validation.json plus the weekly-aggregate and adopter-curve
    figures.
    """
    from . import plots
    from .design import ColumnSchema, build_design, collinearity_diagnostic
    from .diagnostics import (
        ValidationReport,
        adopter_curves,
        kfold_cv,
        overlap_check,
        treated_rmse,
    )
    from .models import GibbsPlan
    from .panel import assign_treatment, content_hash, ingest_csv
    from .synth import verify_assumptions

    post = None
    if posterior_path is not None:
        post, meta, window, schema, panel = _posterior_context(posterior_path, input_path)
        designs = _aligned_designs(panel, schema, post)
    else:
        window = _load_window(schedule_path, input_path)
        panel = ingest_csv(input_path, window)
        schema = ColumnSchema.for_window(window, ar_order)
        designs = build_design(panel, schema)

    ta = assign_treatment(panel, cv_version)

    rmse_before = rmse_during = None
    if post is not None:
        rmse_before, rmse_during = treated_rmse(post, designs, ta)

    overlap = overlap_check(panel, ta)
    curves = adopter_curves(panel)
    assumptions = verify_assumptions(panel)

    lo = designs[0].first_week
    hi = lo + designs[0].n_rows - 1
    collinearity = {
        "week_range": [lo, hi],
        "cv_vs_waiting_corr": collinearity_diagnostic(designs, schema, ta, (lo, hi)),
    }

    folds = None
    if kfold:
        model_key = {"flat": "flat", "hier": "hier_gaussian",
                     "hier-dp": "hier_dp"}[kfold_model]
        folds = kfold_cv(
            panel, cv_version, k=kfold, seed=seed, model=model_key,
            ar_order=ar_order, plan=GibbsPlan(burn_in=200, keep=300),
        )

    report = ValidationReport(
        cv_version=cv_version,
        rmse_before=rmse_before,
        rmse_during=rmse_during,
        folds=folds,
        overlap=overlap,
        adopter=curves,
        assumption_notes=assumptions.notes,
        assumption_pass=assumptions.all_pass,
        collinearity=collinearity,
        config={
            "command": "validate",
            "cv_version": cv_version,
            "seed": seed,
            "kfold": kfold,
            "kfold_model": kfold_model,
            "ar_order": ar_order,
            "model": post.model if post is not None else None,
            "threads": _threads(),
            "panel_sha1": content_hash(input_path),
        },
    )

    out = _out_dir(output)
    report.write_json(out / "validation.json")
    plots.weekly_aggregate_figure(panel, out / "weekly_response.png")
    plots.adopter_curves_figure(curves, panel.window, out / "adopter_curves.png")
    status = []
    if overlap.separation:
        status.append("SEPARATION")
    if report.assumption_pass is False:
        status.append("assumption warnings")
    click.echo(f"wrote {out / 'validation.json'}"
               + (f" ({'; '.join(status)})" if status else ""))


def main(argv=None) -> None:
    try:
        cli.main(args=argv, standalone_mode=False)
    except ReleaseLiftError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()

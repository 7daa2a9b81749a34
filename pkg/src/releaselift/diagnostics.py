"""Fit-quality and identification diagnostics.

Everything here is read-only over fitted posteriors and panels:

- ``treated_rmse``: fitted-mean error over treated users in the weeks
  just before and just after the evaluated release.
- ``kfold_cv``: partition users, refit on each fold's complement, and
  re-estimate the lift ratio on the held-out users alone; stable
  per-fold bands mean the estimate is not driven by any 20% of users.
- ``overlap_check``: propensity of adoption from per-user behaviour
  summaries, with explicit separation handling; adoption must not be
  perfectly predictable from observables, or no comparison group
  exists.
- ``adopter_curves``: weekly mean response of each release's current
  users.  Every active user-week is attributed to exactly one version
  (the first used that week, matching the canonical CSV convention), so
  the count-weighted version curves recombine exactly to the weekly
  mean over active users.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .counterfactual import DEFAULT_BAND, simulate_cf_bands
from .design import ColumnSchema, DesignPair, build_counterfactual, build_design, waiting_age_matrix
from .errors import ConfigError, DataError
from .models import GibbsPlan, Hyperparams, PosteriorSummary, fit_flat, fit_hierarchical
from .panel import Panel, TreatmentAssignment, assign_treatment
from .samplers import chol_spd

__all__ = [
    "DEFAULT_QUANTILES",
    "PROPENSITY_CAP",
    "treated_rmse",
    "FoldCcr",
    "KfoldResult",
    "fold_assignments",
    "kfold_cv",
    "OverlapResult",
    "overlap_check",
    "AdopterCurves",
    "adopter_curves",
    "ValidationReport",
]

DEFAULT_QUANTILES = (20.0, 30.0, 50.0, 70.0, 90.0, 95.0, 96.0, 99.9, 99.99)
PROPENSITY_CAP = 1.0 - 1e-6


# ---------------------------------------------------------------------------
# Fitted-mean error on treated users.

def _fitted_means(posterior: PosteriorSummary, designs: list[DesignPair]):
    pos = {uid: i for i, uid in enumerate(posterior.user_ids)}
    out = {}
    gamma = posterior.gamma_bar
    for dp in designs:
        if dp.user_id not in pos:
            continue
        i = pos[dp.user_id]
        if dp.n_rows != gamma.shape[0]:
            raise ConfigError("design rows do not match fitted week effects")
        mean = dp.f @ posterior.beta_bar[i] + gamma
        if posterior.theta_bar is not None:
            mean = mean + posterior.theta_bar[i]
        out[dp.user_id] = (dp.y, mean, dp.first_week)
    return out


def _window_rmse(fitted: dict, ta: TreatmentAssignment,
                 lo_w: int, hi_w: int) -> float:
    total = 0.0
    count = 0
    for uid in ta.treated_user_ids:
        if uid not in fitted:
            raise ConfigError(f"treated user {uid!r} missing from posterior or designs")
        y, mean, first_week = fitted[uid]
        r0 = max(lo_w - first_week, 0)
        r1 = min(hi_w - first_week, y.shape[0] - 1)
        if r0 > r1:
            continue
        diff = y[r0:r1 + 1] - mean[r0:r1 + 1]
        total += float(diff @ diff)
        count += diff.shape[0]
    if count == 0:
        raise DataError(f"no treated user-weeks in weeks {lo_w}..{hi_w}")
    return float(np.sqrt(total / count))


def treated_rmse(posterior: PosteriorSummary, designs: list[DesignPair],
                 ta: TreatmentAssignment, *, weeks_before: int = 7,
                 weeks_during: int = 7) -> tuple[float, float]:
    """Root mean squared fitted-value error over treated user-weeks in
    the ``weeks_before`` weeks up to the release and the
    ``weeks_during`` weeks from the release on (both clamped to the
    fitted window)."""
    if weeks_before < 1 or weeks_during < 1:
        raise ConfigError("rmse windows must be at least one week")
    fitted = _fitted_means(posterior, designs)
    t1 = ta.release_week
    before = _window_rmse(fitted, ta, t1 - weeks_before, t1 - 1)
    during = _window_rmse(fitted, ta, t1, t1 + weeks_during - 1)
    return before, during


# ---------------------------------------------------------------------------
# K-fold user holdout: re-estimated lift ratio per held-out fold.

@dataclass(frozen=True)
class FoldCcr:
    fold: int
    n_users: int
    n_treated: int
    ccr_mean: float
    lower95: float
    upper95: float


@dataclass
class KfoldResult:
    model: str
    k: int
    seed: int
    cv: str
    n_sims: int
    folds: list[FoldCcr]
    skipped: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "model": self.model, "k": self.k, "seed": self.seed,
            "cv": self.cv, "n_sims": self.n_sims,
            "folds": [{"fold": f.fold, "n_users": f.n_users,
                       "n_treated": f.n_treated, "ccr_mean": f.ccr_mean,
                       "lower95": f.lower95, "upper95": f.upper95}
                      for f in self.folds],
            "skipped": list(self.skipped),
        }


def fold_assignments(user_ids, k: int, seed: int) -> dict:
    """Deterministic balanced folds: order users by a seeded hash, then
    deal round-robin.  Fold sizes differ by at most one."""
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if k > len(user_ids):
        raise ConfigError("more folds than users")
    def key(uid):
        h = hashlib.blake2s(repr((seed, uid)).encode()).hexdigest()
        return (h, str(uid))
    ordered = sorted(user_ids, key=key)
    return {uid: i % k for i, uid in enumerate(ordered)}


def _conditional_coef_means(posterior: PosteriorSummary,
                            designs: list[DesignPair],
                            schema: ColumnSchema) -> np.ndarray:
    """Coefficient full-conditional means for users outside the fit,
    given the fitted global posterior means."""
    F = np.stack([dp.f for dp in designs])
    Y = np.stack([dp.y for dp in designs])
    FT = F.transpose(0, 2, 1)
    G = np.matmul(FT, F)
    sig_chol = chol_spd(posterior.sigma_bar, "Sigma")
    half = np.linalg.solve(sig_chol, np.eye(schema.d))
    sig_inv = half.T @ half
    nu = posterior.nu_bar
    resid = Y - posterior.gamma_bar[None, :]
    rhs = np.matmul(FT, resid[:, :, None])[:, :, 0] / nu
    rhs += sig_inv @ posterior.mu_bar
    P = sig_inv[None, :, :] + G / nu
    L = chol_spd(P, "held-out coefficient precision")
    u = np.linalg.solve(L, rhs[:, :, None])
    return np.linalg.solve(np.swapaxes(L, 1, 2), u)[:, :, 0]


def kfold_cv(panel: Panel, cv: str, *, k: int = 5, seed: int,
             model: str = "hier_gaussian", ar_order: int = 4,
             plan: GibbsPlan | None = None,
             hyper: Hyperparams = Hyperparams(),
             n_sims: int = 200, band=DEFAULT_BAND,
             assignments: dict | None = None) -> KfoldResult:
    """Hold out each fold of users, refit on the rest, and re-estimate
    the lift ratio on the held-out treated users only.

    Held-out users never enter the fit; their coefficient vectors are
    drawn from the full conditional given the fold fit's global
    posterior means (the same mechanism the banded estimate uses), with
    the conditional mean as their point coefficient.  A fold whose
    held-out users include no treated ones is skipped with a warning.
    """
    if plan is None:
        plan = GibbsPlan(burn_in=200, keep=300)
    window = panel.window
    schema = ColumnSchema.for_window(window, ar_order)
    designs = build_design(panel, schema)
    ta = assign_treatment(panel, cv)
    ids = [dp.user_id for dp in designs]
    assign = assignments if assignments is not None else fold_assignments(ids, k, seed)
    treated = set(ta.treated_user_ids)

    folds: list[FoldCcr] = []
    skipped: list[dict] = []
    for fold in range(k):
        train = [dp for dp in designs if assign[dp.user_id] != fold]
        held = sorted((dp for dp in designs if assign[dp.user_id] == fold),
                      key=lambda dp: dp.user_id)
        held_treated = [dp.user_id for dp in held if dp.user_id in treated]
        if not held_treated:
            msg = f"fold {fold}: no treated users held out; skipped"
            warnings.warn(msg)
            skipped.append({"fold": fold, "reason": msg})
            continue
        if not train:
            raise ConfigError(f"fold {fold} holds out every user; nothing to fit")
        fold_seed = seed + 7919 * (fold + 1)
        if model == "flat":
            post = fit_flat(train, schema, seed=fold_seed, plan=plan)
            beta_held = np.tile(post.mu_draws.mean(axis=0), (len(held), 1))
        elif model in ("hier_gaussian", "hier_dp"):
            post = fit_hierarchical(
                train, schema, seed=fold_seed, plan=plan, hyper=hyper,
                error_model="dp_mixture" if model == "hier_dp" else "gaussian")
            beta_held = _conditional_coef_means(post, held, schema)
        else:
            raise ConfigError(f"unknown model {model!r}")
        post_held = PosteriorSummary(
            model=post.model, user_ids=[dp.user_id for dp in held],
            first_week=held[0].first_week, schema_d=schema.d,
            beta_bar=beta_held, mu_draws=post.mu_draws,
            sigma_draws=post.sigma_draws, gamma_draws=post.gamma_draws,
            nu_draws=post.nu_draws, seed=fold_seed,
        )
        ta_held = replace(
            ta,
            treated_user_ids=tuple(held_treated),
            control_user_ids=tuple(dp.user_id for dp in held
                                   if dp.user_id not in treated),
            fallback_user_ids=tuple(u for u in ta.fallback_user_ids
                                    if assign[u] == fold),
        )
        held_cf = build_counterfactual(panel, schema, held, ta_held)
        rep = simulate_cf_bands(post_held, held, held_cf, ta_held, schema,
                                seed=fold_seed, n_sims=n_sims, band=band)
        folds.append(FoldCcr(fold=fold, n_users=len(held),
                             n_treated=len(held_treated),
                             ccr_mean=rep.ccr_mean,
                             lower95=rep.ccr_band[0],
                             upper95=rep.ccr_band[1]))
    return KfoldResult(model=model, k=k, seed=seed, cv=cv, n_sims=n_sims,
                       folds=folds, skipped=skipped)


# ---------------------------------------------------------------------------
# Propensity overlap.

@dataclass
class OverlapResult:
    """Adoption propensity from per-user behaviour summaries.

    ``quantiles`` are over treated users' fitted propensities and are
    non-decreasing by construction.  ``violation_rate`` is the share of
    treated users whose propensity is numerically indistinguishable
    from 1: such users have no comparable never-adopters at all.
    """

    n_users: int
    n_treated: int
    feature_names: list
    coef: dict
    quantiles: dict
    violation_rate: float
    separation: bool
    converged: bool
    ridge: float

    def to_json_dict(self) -> dict:
        return {
            "n_users": self.n_users, "n_treated": self.n_treated,
            "feature_names": list(self.feature_names), "coef": self.coef,
            "quantiles": self.quantiles, "violation_rate": self.violation_rate,
            "separation": self.separation, "converged": self.converged,
            "ridge": self.ridge,
        }


def _adoption_features(panel: Panel, ta: TreatmentAssignment):
    """Per-user summaries that could drive adoption: how long the user
    historically waits after releases (collapsed flag age averaged over
    all weeks), whether they are new to the product, their typical
    response level, and their total activity."""
    names = ["mean_wait_age", "virgin", "mean_rolling_avg", "total_sessions"]
    wait_age = waiting_age_matrix(panel).mean(axis=1)
    treated = set(ta.treated_user_ids)
    rows = []
    labels = []
    for i, rec in enumerate(panel.users):
        rows.append([float(wait_age[i]), float(rec.virgin),
                     float(rec.rolling_avg.mean()), float(rec.sessions.sum())])
        labels.append(1.0 if rec.user_id in treated else 0.0)
    return names, np.asarray(rows), np.asarray(labels)


def _irls_logistic(X, y, ridge: float, max_iter: int = 100, tol: float = 1e-8):
    """Newton/IRLS for a logistic fit; returns (w, converged, blew_up)."""
    n, d = X.shape
    w = np.zeros(d)
    for _ in range(max_iter):
        eta = np.clip(X @ w, -35.0, 35.0)
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - p) - ridge * w
        if np.max(np.abs(grad)) < tol:
            return w, True, False
        wt = np.maximum(p * (1.0 - p), 1e-10)
        H = (X * wt[:, None]).T @ X + ridge * np.eye(d)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return w, False, True
        w = w + step
        if np.max(np.abs(w)) > 1e3:
            return w, False, True
    return w, False, np.max(np.abs(w)) > 50.0


def overlap_check(panel: Panel, ta: TreatmentAssignment, *,
                  quantiles=DEFAULT_QUANTILES, ridge: float = 1e-6,
                  max_iter: int = 100, tol: float = 1e-8) -> OverlapResult:
    names, X_raw, y = _adoption_features(panel, ta)
    if y.sum() == 0 or y.sum() == y.shape[0]:
        raise DataError("cannot assess overlap: adoption is constant across users")
    mu = X_raw.mean(axis=0)
    sd = X_raw.std(axis=0)
    sd[sd == 0] = 1.0
    X = np.column_stack([np.ones(X_raw.shape[0]), (X_raw - mu) / sd])

    w, converged, blew_up = _irls_logistic(X, y, 0.0, max_iter, tol)
    separation = blew_up
    used_ridge = 0.0
    if blew_up or not converged:
        w, converged, blew_up = _irls_logistic(X, y, ridge, max_iter, tol)
        used_ridge = ridge
        separation = separation or blew_up or np.max(np.abs(w)) > 50.0

    eta = X @ w
    prop = 1.0 / (1.0 + np.exp(-np.clip(eta, -35.0, 35.0)))
    p_treated = prop[y == 1.0]
    qs = {f"{q:g}": float(np.percentile(p_treated, q)) for q in quantiles}
    violation = float(np.mean(p_treated >= PROPENSITY_CAP))
    coef = {"intercept": float(w[0])}
    coef.update({name: float(val) for name, val in zip(names, w[1:])})
    return OverlapResult(
        n_users=int(y.shape[0]), n_treated=int(y.sum()),
        feature_names=list(names), coef=coef, quantiles=qs,
        violation_rate=violation, separation=bool(separation),
        converged=bool(converged), ridge=used_ridge,
    )


# ---------------------------------------------------------------------------
# Adopter curves.

@dataclass
class AdopterCurves:
    """Weekly mean response of each release's current users.

    Keys are (version_id, calendar week); weeks where a version has no
    current users are absent, not zero.
    """

    mean_response: dict
    n_adopters: dict

    def rows(self):
        for key in self.mean_response:
            v, w = key
            yield v, w, self.mean_response[key], self.n_adopters[key]

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("version,week,mean_response,n_adopters\n")
            for v, w, m, n in self.rows():
                fh.write(f"{v},{w},{m!r},{n}\n")

    def to_json_rows(self) -> list:
        return [{"version": v, "week": w, "mean_response": m, "n_adopters": n}
                for v, w, m, n in self.rows()]


def adopter_curves(panel: Panel) -> AdopterCurves:
    """Per-version weekly mean response among that week's current users.

    Each active user-week counts under exactly one version — the first
    version used that week — so the adopter-count-weighted sum across
    versions reproduces the weekly total response of active users
    exactly.
    """
    window = panel.window
    usage = panel.usage_tensor()
    resp = panel.weekly_response_matrix()
    active = usage.sum(axis=2) > 0
    first_col = np.argmax(usage > 0, axis=2)
    mean_response = {}
    n_adopters = {}
    for col, v in enumerate(window.version_ids):
        sel = active & (first_col == col)
        counts = sel.sum(axis=0)
        sums = (resp * sel).sum(axis=0)
        for t in np.flatnonzero(counts):
            mean_response[(v, int(t) + 1)] = float(sums[t] / counts[t])
            n_adopters[(v, int(t) + 1)] = int(counts[t])
    return AdopterCurves(mean_response=mean_response, n_adopters=n_adopters)


# ---------------------------------------------------------------------------
# Combined report.

@dataclass
class ValidationReport:
    """Bundle of validation outputs for one panel + release."""

    cv_version: str
    rmse_before: float | None = None
    rmse_during: float | None = None
    folds: KfoldResult | None = None
    overlap: OverlapResult | None = None
    adopter: AdopterCurves | None = None
    assumption_notes: list = field(default_factory=list)
    assumption_pass: bool | None = None
    collinearity: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def overlap_quantiles(self) -> dict | None:
        return None if self.overlap is None else self.overlap.quantiles

    @property
    def violation_rate(self) -> float | None:
        return None if self.overlap is None else self.overlap.violation_rate

    def to_json_dict(self) -> dict:
        return {
            "cv_version": self.cv_version,
            "rmse_before": self.rmse_before,
            "rmse_during": self.rmse_during,
            "folds": self.folds.to_json_dict() if self.folds else None,
            "overlap": self.overlap.to_json_dict() if self.overlap else None,
            "adopter_curves": (self.adopter.to_json_rows()
                               if self.adopter else None),
            "assumption_notes": list(self.assumption_notes),
            "assumption_pass": self.assumption_pass,
            "collinearity": self.collinearity,
            "config": self.config,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

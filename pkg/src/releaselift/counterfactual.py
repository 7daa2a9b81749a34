"""Counterfactual response prediction and lift ratios.

For every treated user the adoption-era rows of their design matrix are
rewritten as if the evaluated release had never shipped (usage mass
moved back onto the prior version; see ``design.build_counterfactual``),
and the fitted model predicts the response path that rewritten history
implies.  The headline statistic is the ratio of predicted
counterfactual response to observed response, summed over treated users
across the release's lifetime weeks::

    ratio = sum_cf / sum_observed

A ratio of 1 means the release changed nothing; below 1 means the
release raised the response.  ``catt_per_user`` is the per-user average
difference, ``(sum_observed - sum_cf) / n_treated``.

Because the model is autoregressive, counterfactual predictions are
rolled forward sequentially across each user's rewritten span: lagged
response entries that refer to re-predicted weeks are replaced by the
re-predicted values; outside the span the true history is used.  The
reported ratio and its band come from simulation draws that re-draw
per-user coefficients from their full conditional given the *observed*
data and roll forward with observation noise feeding the lags
(``ccr_mean`` is the mean of those draws; the noiseless roll-forward at
posterior means is kept as ``ccr_point``).  Negative simulated values
are kept as-is; truncating them would shift the aggregates.

``null_ccr`` is the deliberately naive estimator: the ratio of treated
mean response in the weeks just before the release to the mean just
after, with no model and no adoption-age adjustment.  On panels where
fast adopters are systematically heavy users it is badly confounded,
which is the point of reporting it next to the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .design import ColumnSchema, DesignPair
from .errors import ConfigError, DataError
from .models import PosteriorSummary
from .panel import Panel, TreatmentAssignment
from .samplers import RngStream, chol_spd

__all__ = [
    "DEFAULT_N_SIMS",
    "DEFAULT_BAND",
    "CcrReport",
    "predict_cf_point",
    "simulate_cf_bands",
    "null_ccr",
]

DEFAULT_N_SIMS = 500
DEFAULT_BAND = (2.5, 97.5)


@dataclass
class CcrReport:
    """Lift-ratio estimate for one release, with per-week totals.

    ``lifetime_weeks`` are the covered calendar weeks (the release's
    lifetime clamped to the fitted window; for the null estimator, the
    after-release half of its comparison window).  ``factual_total`` and
    ``cf_total`` are aggregates over treated users per covered week;
    ``cf_lower``/``cf_upper`` band the weekly counterfactual totals.
    ``draws_used`` is 0 for estimates with no simulation component, in
    which case the band degenerates to the point value.
    """

    cv: str
    method: str                       # "model" or "null"
    model: str                        # posterior tag, or "none"
    ccr_mean: float
    ccr_band: tuple[float, float]
    catt_per_user: float
    n_treated: int
    draws_used: int
    seed: int
    band: tuple[float, float]         # percentile pair used for ccr_band
    lifetime_weeks: list[int]
    factual_total: list[float]
    cf_total: list[float]
    cf_lower: list[float]
    cf_upper: list[float]
    ccr_point: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.lifetime_weeks)
        for name in ("factual_total", "cf_total", "cf_lower", "cf_upper"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} does not cover the report weeks")
        if not (self.ccr_band[0] <= self.ccr_mean <= self.ccr_band[1]):
            raise ConfigError("ccr_band does not contain ccr_mean")

    @property
    def factual_sum(self) -> float:
        return float(sum(self.factual_total))

    @property
    def cf_sum(self) -> float:
        return float(sum(self.cf_total))

    def to_json_dict(self) -> dict:
        return {
            "cv": self.cv,
            "method": self.method,
            "model": self.model,
            "ccr_mean": self.ccr_mean,
            "ccr_band": list(self.ccr_band),
            "ccr_point": self.ccr_point,
            "catt_per_user": self.catt_per_user,
            "n_treated": self.n_treated,
            "draws_used": self.draws_used,
            "seed": self.seed,
            "band": list(self.band),
            "lifetime_weeks": list(self.lifetime_weeks),
            "factual_total": list(self.factual_total),
            "cf_total": list(self.cf_total),
            "cf_lower": list(self.cf_lower),
            "cf_upper": list(self.cf_upper),
            "config": self.config,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Weekly totals as delimited text, one row per covered week."""
        with open(path, "w") as fh:
            fh.write("week,factual_total,cf_mean,cf_lower,cf_upper\n")
            for w, f, c, a, b in zip(self.lifetime_weeks, self.factual_total,
                                     self.cf_total, self.cf_lower, self.cf_upper):
                fh.write(f"{w},{f!r},{c!r},{a!r},{b!r}\n")

    @classmethod
    def from_json(cls, path) -> "CcrReport":
        with open(path) as fh:
            raw = json.load(fh)
        raw["ccr_band"] = tuple(raw["ccr_band"])
        raw["band"] = tuple(raw["band"])
        return cls(**raw)


def predict_cf_point(pair: DesignPair, beta_i: np.ndarray,
                     gamma_bar: np.ndarray, schema: ColumnSchema, *,
                     theta_i: float = 0.0) -> np.ndarray:
    """One user's predicted weekly response path at fixed coefficients.

    Inside the design's rewritten span (``pair.cf_span``) the lagged
    response entries are replaced sequentially by the predictions of
    the preceding weeks; everywhere else the matrix rows are used
    as stored, so a design without a span yields the plain fitted
    values.  Returns one value per design row.
    """
    beta_i = np.asarray(beta_i, dtype=float)
    gamma_bar = np.asarray(gamma_bar, dtype=float)
    if beta_i.shape != (schema.d,):
        raise ConfigError("coefficient vector does not match the column schema")
    if gamma_bar.shape != (pair.n_rows,):
        raise ConfigError("week effects do not match the design rows")
    if pair.cf_span is None:
        start, end = pair.n_rows, pair.n_rows - 1   # empty span
    else:
        start = max(pair.cf_span[0] - pair.first_week, 0)
        end = min(pair.cf_span[1] - pair.first_week, pair.n_rows - 1)
    y_sim = _roll_forward(pair.f[None], beta_i[None], gamma_bar,
                          np.array([theta_i]), np.array([start]),
                          np.array([end]), schema)[0]
    base = pair.f @ beta_i + gamma_bar + theta_i
    inside = (np.arange(pair.n_rows) >= start) & (np.arange(pair.n_rows) <= end)
    return np.where(inside, y_sim, base)


def _treated_arrays(posterior: PosteriorSummary, designs: list[DesignPair],
                    designs_cf: list[DesignPair], ta: TreatmentAssignment,
                    schema: ColumnSchema):
    """Stack treated users' factual/counterfactual pieces in sorted order."""
    by_id = {dp.user_id: i for i, dp in enumerate(designs)}
    cf_by_id = {dp.user_id: dp for dp in designs_cf}
    pos = {uid: i for i, uid in enumerate(posterior.user_ids)}
    rows = None
    picked = []
    for uid in ta.treated_user_ids:
        if uid not in by_id or uid not in cf_by_id:
            raise ConfigError(f"treated user {uid!r} missing from designs")
        if uid not in pos:
            raise ConfigError(f"treated user {uid!r} not in fitted posterior")
        dp = designs[by_id[uid]]
        cf = cf_by_id[uid]
        if cf.cf_span is None:
            raise ConfigError(f"user {uid!r} has no rewritten span; not a treated design")
        if rows is None:
            rows = (dp.first_week, dp.n_rows)
        elif rows != (dp.first_week, dp.n_rows):
            raise ConfigError("treated designs must share one week window")
        picked.append((dp, cf, pos[uid]))

    first_week, n_rows = rows
    nt = len(picked)
    d = schema.d
    Y = np.empty((nt, n_rows))
    Ff = np.empty((nt, n_rows, d))
    Fc = np.empty((nt, n_rows, d))
    span_start = np.empty(nt, dtype=np.int64)
    span_end = np.empty(nt, dtype=np.int64)
    beta = np.empty((nt, d))
    theta = np.zeros(nt)
    for j, (dp, cf, pi) in enumerate(picked):
        Y[j] = dp.y
        Ff[j] = dp.f
        Fc[j] = cf.f
        span_start[j] = max(cf.cf_span[0] - first_week, 0)
        span_end[j] = min(cf.cf_span[1] - first_week, n_rows - 1)
        beta[j] = posterior.beta_bar[pi]
        if posterior.theta_bar is not None:
            theta[j] = posterior.theta_bar[pi]
    return first_week, n_rows, Y, Ff, Fc, span_start, span_end, beta, theta


def _lifetime_rows(first_week: int, n_rows: int, ta: TreatmentAssignment):
    r0 = ta.release_week - first_week
    r1 = ta.lifetime_end - first_week
    r0c, r1c = max(r0, 0), min(r1, n_rows - 1)
    if r0c > r1c:
        raise DataError(
            f"lifetime weeks {ta.release_week}..{ta.lifetime_end} fall outside "
            f"the fitted window"
        )
    return r0c, r1c


def _roll_forward(Fc, beta, gamma_rows, theta, span_start, span_end,
                  schema: ColumnSchema,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """Sequential counterfactual response paths for a block of users.

    Returns predictions only on rows inside each user's rewritten span
    (zeros elsewhere; the caller splices observed values back in).  Lag
    entries referring to re-predicted weeks are swapped for the
    rolled-forward values; lag entries referring to weeks outside the
    span keep the observed history already present in ``Fc``.
    """
    nt, n_rows, _ = Fc.shape
    p = schema.ar_order
    lag0 = schema.lag_slice.start
    base = np.matmul(Fc, beta[:, :, None])[:, :, 0]
    r_idx = np.arange(n_rows)[None, :]
    update = (r_idx >= span_start[:, None]) & (r_idx <= span_end[:, None])
    y_sim = np.zeros((nt, n_rows))
    for r in range(n_rows):
        mean_r = base[:, r] + gamma_rows[r] + theta
        for j in range(1, p + 1):
            src = r - j
            if src < 0:
                continue
            bj = beta[:, lag0 + j - 1]
            mean_r = mean_r + np.where(
                update[:, src] & update[:, r],
                (y_sim[:, src] - Fc[:, r, lag0 + j - 1]) * bj,
                0.0,
            )
        if noise is not None:
            mean_r = mean_r + noise[:, r]
        y_sim[:, r] = np.where(update[:, r], mean_r, 0.0)
    return y_sim


def _point_paths(posterior: PosteriorSummary, designs: list[DesignPair],
                 designs_cf: list[DesignPair], ta: TreatmentAssignment,
                 schema: ColumnSchema) -> dict:
    """Noiseless counterfactual paths at posterior means, stacked over
    the treated users; observed values outside each rewritten span."""
    first_week, n_rows, Y, Ff, Fc, s0, s1, beta, theta = _treated_arrays(
        posterior, designs, designs_cf, ta, schema)
    gamma_rows = posterior.gamma_bar
    if gamma_rows.shape[0] != n_rows:
        raise ConfigError("posterior week effects do not match design rows")
    y_sim = _roll_forward(Fc, beta, gamma_rows, theta, s0, s1, schema)
    r_idx = np.arange(n_rows)[None, :]
    update = (r_idx >= s0[:, None]) & (r_idx <= s1[:, None])
    y_cf = np.where(update, y_sim, Y)
    r0, r1 = _lifetime_rows(first_week, n_rows, ta)
    return {
        "first_week": first_week,
        "rows": (r0, r1),
        "y": Y,
        "y_cf": y_cf,
        "span_start": s0,
        "span_end": s1,
        "update": update,
        "beta": beta,
        "theta": theta,
        "Ff": Ff,
        "Fc": Fc,
    }


def simulate_cf_bands(posterior: PosteriorSummary, designs: list[DesignPair],
                      designs_cf: list[DesignPair], ta: TreatmentAssignment,
                      schema: ColumnSchema, *, seed: int,
                      n_sims: int = DEFAULT_N_SIMS, band=DEFAULT_BAND,
                      full_posterior: bool = False) -> CcrReport:
    """Simulation-banded lift ratio for one release.

    Each simulation re-draws every treated user's coefficient vector
    from its full conditional given the observed (factual) data at the
    posterior means of the global parameters, then rolls the rewritten
    design forward with fresh observation noise feeding the lags.  The
    reported ``ccr_mean`` is the mean of the per-simulation aggregate
    ratios and the band its empirical percentiles.

    ``full_posterior=True`` re-draws the global parameters from the
    kept chain for every simulation instead of fixing them at posterior
    means; slower, slightly wider bands.
    """
    if n_sims < 1:
        raise ConfigError("n_sims must be at least 1")
    point = _point_paths(posterior, designs, designs_cf, ta, schema)
    r0, r1 = point["rows"]
    Y, y_cf = point["y"], point["y_cf"]
    nt, n_rows = Y.shape
    weeks = list(range(point["first_week"] + r0, point["first_week"] + r1 + 1))

    weekly_fact = Y[:, r0:r1 + 1].sum(axis=0)
    fact_total = float(weekly_fact.sum())
    if fact_total <= 0:
        raise DataError("treated users have no observed response over the "
                        "lifetime weeks; the ratio is undefined")
    ccr_point = float(y_cf[:, r0:r1 + 1].sum() / fact_total)

    stream = RngStream(seed)
    Fc = point["Fc"]
    Ff = point["Ff"]
    theta = point["theta"]
    s0, s1 = point["span_start"], point["span_end"]
    update = point["update"]
    ids = list(ta.treated_user_ids)
    d = schema.d
    M = posterior.mu_draws.shape[0]
    flat = posterior.model == "flat"
    sim_chunk = 16

    if not flat:
        FTf = Ff.transpose(0, 2, 1)
        G = np.matmul(FTf, Ff)
        FtY = np.matmul(FTf, Y[:, :, None])[:, :, 0]
        Ft1 = Ff.sum(axis=1)

    def conditional_chol(mu, sigma, gamma_rows, nu):
        # beta_i | observed data, globals: N(m, P^-1), P = Sigma^-1 + G/nu.
        sig_chol = chol_spd(sigma, "Sigma")
        half = np.linalg.solve(sig_chol, np.eye(d))
        sig_inv = half.T @ half
        rhs = (FtY - np.matmul(FTf, gamma_rows)) / nu
        rhs -= Ft1 * (theta / nu)[:, None]
        rhs += sig_inv @ mu
        P = sig_inv[None, :, :] + G / nu
        L = chol_spd(P, "coefficient conditional precision")
        u = np.linalg.solve(L, rhs[:, :, None])
        m = np.linalg.solve(np.swapaxes(L, 1, 2), u)[:, :, 0]
        return m, L

    if not flat and not full_posterior:
        m0, L0 = conditional_chol(posterior.mu_bar, posterior.sigma_bar,
                                  posterior.gamma_bar, posterior.nu_bar)

    ccr_sims = np.empty(n_sims)
    weekly_sims = np.empty((n_sims, r1 - r0 + 1))
    pool = None
    pool_chunk = -1
    for s in range(n_sims):
        chunk_idx, offset = divmod(s, sim_chunk)
        if chunk_idx != pool_chunk:
            pool = np.empty((nt, sim_chunk, d + n_rows))
            for j, uid in enumerate(ids):
                g = stream.generator("cf-user", uid, chunk_idx)
                pool[j] = g.standard_normal((sim_chunk, d + n_rows))
            pool_chunk = chunk_idx
        if flat:
            k = int(stream.generator("cf-pick", s).integers(M))
            beta_s = np.tile(posterior.mu_draws[k], (nt, 1))
            gamma_rows = posterior.gamma_draws[k]
            nu_s = float(posterior.nu_draws[k])
        elif full_posterior:
            k = int(stream.generator("cf-pick", s).integers(M))
            m_s, L_s = conditional_chol(posterior.mu_draws[k],
                                        posterior.sigma_draws[k],
                                        posterior.gamma_draws[k],
                                        float(posterior.nu_draws[k]))
            gamma_rows = posterior.gamma_draws[k]
            nu_s = float(posterior.nu_draws[k])
        else:
            m_s, L_s = m0, L0
            gamma_rows = posterior.gamma_bar
            nu_s = posterior.nu_bar
        if not flat:
            z = pool[:, offset, :d]
            beta_s = m_s + np.linalg.solve(
                np.swapaxes(L_s, 1, 2), z[:, :, None])[:, :, 0]
        noise = np.sqrt(nu_s) * pool[:, offset, d:]
        y_s = _roll_forward(Fc, beta_s, gamma_rows, theta, s0, s1, schema,
                            noise=noise)
        y_s = np.where(update, y_s, Y)
        weekly_sims[s] = y_s[:, r0:r1 + 1].sum(axis=0)
        ccr_sims[s] = weekly_sims[s].sum() / fact_total

    lo_q, hi_q = band
    ccr_mean = float(ccr_sims.mean())
    ccr_band = (float(np.percentile(ccr_sims, lo_q)),
                float(np.percentile(ccr_sims, hi_q)))
    cf_total = weekly_sims.mean(axis=0)
    catt = float((fact_total - cf_total.sum()) / nt)

    return CcrReport(
        cv=ta.cv, method="model", model=posterior.model,
        ccr_mean=ccr_mean, ccr_band=ccr_band, ccr_point=ccr_point,
        catt_per_user=catt, n_treated=nt, draws_used=n_sims, seed=seed,
        band=tuple(band), lifetime_weeks=weeks,
        factual_total=weekly_fact.tolist(),
        cf_total=cf_total.tolist(),
        cf_lower=np.percentile(weekly_sims, lo_q, axis=0).tolist(),
        cf_upper=np.percentile(weekly_sims, hi_q, axis=0).tolist(),
        config={"full_posterior": full_posterior},
    )


def null_ccr(panel: Panel, ta: TreatmentAssignment,
             half_window: int) -> CcrReport:
    """Naive before/after means ratio around the release, no model.

    Treated users' mean weekly response over the ``half_window`` weeks
    before the release week, divided by their mean over the
    ``half_window`` weeks from the release week on.  Every treated
    user-week in the window counts, including zero-activity weeks.  On
    a panel where fast adopters respond hardest right after a release
    this underestimates the ratio even when the release changed
    nothing.
    """
    if half_window < 1:
        raise ConfigError("half_window must be a positive number of weeks")
    t1 = ta.release_week
    n_weeks = panel.window.n_weeks
    lo, hi = t1 - half_window, t1 + half_window - 1
    if lo < 1 or hi > n_weeks:
        raise DataError(
            f"comparison window {lo}..{hi} leaves the {n_weeks}-week study window"
        )
    ids = list(ta.treated_user_ids)
    if not ids:
        raise DataError("no treated users; the ratio is undefined")
    resp = np.stack([panel.user(uid).response for uid in ids])
    before = resp[:, lo - 1: t1 - 1]
    after = resp[:, t1 - 1: hi]
    before_mean = float(before.mean())
    after_mean = float(after.mean())
    if after_mean <= 0:
        raise DataError("treated users have no response after the release; "
                        "the ratio is undefined")
    ccr = before_mean / after_mean
    nt = len(ids)

    weeks = list(range(t1, hi + 1))
    weekly_fact = after.sum(axis=0)
    weekly_cf = [before_mean * nt] * len(weeks)
    catt = float((weekly_fact.sum() - sum(weekly_cf)) / nt)

    return CcrReport(
        cv=ta.cv, method="null", model="none",
        ccr_mean=ccr, ccr_band=(ccr, ccr), ccr_point=ccr,
        catt_per_user=catt, n_treated=nt, draws_used=0, seed=0,
        band=DEFAULT_BAND, lifetime_weeks=weeks,
        factual_total=weekly_fact.tolist(),
        cf_total=weekly_cf,
        cf_lower=list(weekly_cf),
        cf_upper=list(weekly_cf),
        config={"half_window": half_window},
    )

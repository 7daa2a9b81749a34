"""Synthetic panel generator with known ground truth.

The generator simulates a fleet of users riding a sequence of releases
and produces two response universes from identical noise: a factual one
and a placebo one in which every release's planted effect is removed.
The true causal ratio of a version is then a deterministic function of
the generated data rather than a Monte-Carlo estimate.

Confounding is controlled by one knob, ``early_adopter_link`` (rho):
it is the correlation between a user's activity level and adoption
speed, and it simultaneously scales the post-release engagement burst
(the waiting-time coefficients) of active users.  At rho = 0 adoption
timing is random and the burst vanishes, so naive before/after
comparisons are clean; at the default rho = 0.8 they are badly biased
while the fitted model's ratio stays centered on the truth.

Responses follow the fitted model's own conditional likelihood: each
user owns a coefficient vector over the design columns (lags, versions,
waiting flags, upgrade week, virgin, rolling average), weekly effects
are shared, and noise is homoskedastic Gaussian.  The response is drawn
on every paneled week — it measures an outcome that exists whether or
not the user opened the product that week — while the usage-driven
columns contribute only on active weeks.  ``zero_inflated`` instead
hard-zeroes inactive weeks, a stress case outside the model class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .design import ColumnSchema
from .errors import ConfigError
from .panel import (
    ROLLING_LOOKBACK_WEEKS,
    Panel,
    StudyWindow,
    build_user_record,
)
from .samplers import RngStream

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (
    ("v6", 2), ("v7", 9), ("v8", 16), ("v9", 30),
    ("v10", 37), ("v11", 45), ("v12", 52),
)
DEFAULT_LEGACY = ("v5",)

DEFAULT_WAITING_DECAY = (
    40.0, 31.0, 24.0, 18.0, 13.5, 10.0, 7.0, 5.0,
    3.5, 2.4, 1.6, 1.0, 0.6, 0.2,
)


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic world.

    When ``mu_star``/``sigma_star`` are provided, user coefficient
    vectors are drawn as ``N(mu_star, sigma_star)`` verbatim; otherwise
    a structured default ties response levels and burst sizes to a
    lognormal per-user activity scale.
    """

    seed: int = 20260815
    n_users: int = 10000
    n_weeks: int = 52
    release_schedule: tuple = DEFAULT_SCHEDULE
    legacy_versions: tuple = DEFAULT_LEGACY
    max_wait: int = 14
    ar_coefs: tuple = (0.025, 0.012, 0.008, 0.005)
    base_level: float = 75.0
    activity_sd: float = 0.7
    activity_floor: float = 0.35
    version_affinity_sd: float = 6.0
    version_jitter_sd: float = 0.5
    waiting_decay: tuple = DEFAULT_WAITING_DECAY
    early_adopter_link: float = 0.8
    adoption_hazard: tuple = (0.08, 0.75)
    activity_prob: tuple = (0.72, 0.94)
    planted_effects: dict = field(default_factory=dict)
    upgrade_week_coef: float = 6.0
    # Share of upgrade weeks where every session lands on the new
    # version (an update applied before the first session of the week);
    # the rest split sessions across old and new mid-week.
    clean_upgrade_frac: float = 0.6
    virgin_coef: float = -4.0
    rolling_coef: float = 0.02
    week_effect_offset: float = 30.0
    week_effect_amplitude: float = 4.0
    noise_sd: float = 9.0
    virgin_frac: float = 0.12
    sessions_mean: float = 5.0
    # Response stays continuous Gaussian on every in-panel week by
    # default; flipping this gates it to zero on inactive weeks, a
    # stress case the Gaussian response model cannot represent.
    zero_inflated: bool = False
    error_offsets: tuple | None = None
    mu_star: tuple | None = None
    sigma_star: tuple | None = None

    def __post_init__(self):
        if not (-1.0 <= self.early_adopter_link <= 1.0):
            raise ConfigError("early_adopter_link must be a correlation in [-1, 1]")
        if len(self.waiting_decay) != self.max_wait:
            raise ConfigError(
                f"waiting_decay needs {self.max_wait} entries, got {len(self.waiting_decay)}"
            )
        if any(b > a for a, b in zip(self.waiting_decay, self.waiting_decay[1:])):
            raise ConfigError("waiting_decay must be non-increasing")
        lo, hi = self.adoption_hazard
        if not (0 <= lo <= hi <= 1):
            raise ConfigError("adoption_hazard bounds must satisfy 0 <= lo <= hi <= 1")
        for v, effect in self.planted_effects.items():
            if effect <= 0:
                raise ConfigError(f"planted effect for {v!r} must be positive")

    @property
    def window(self) -> StudyWindow:
        return StudyWindow(
            n_weeks=self.n_weeks,
            release_schedule=self.release_schedule,
            version_ids=tuple(self.legacy_versions) + tuple(v for v, _ in self.release_schedule),
            max_wait=self.max_wait,
        )

    @property
    def schema(self) -> ColumnSchema:
        return ColumnSchema.for_window(self.window, ar_order=len(self.ar_coefs))


@dataclass
class GroundTruth:
    """What the generator actually did, for scoring estimators."""

    user_ids: list
    schema: ColumnSchema
    beta_star: np.ndarray
    gamma_star: np.ndarray
    nu_star: float
    activity: np.ndarray
    adoption_week: dict
    true_ccr: dict
    treated_counts: dict
    theta_labels: np.ndarray | None
    theta_values: np.ndarray | None
    clip_count: int
    # Weekly responses the same users would have produced had every
    # release been a placebo (same noise, no planted lifts).
    response_placebo: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "true_ccr": {v: float(c) for v, c in self.true_ccr.items()},
            "treated_counts": {v: int(c) for v, c in self.treated_counts.items()},
            "nu_star": float(self.nu_star),
            "clip_count": int(self.clip_count),
            "n_users": len(self.user_ids),
        }


def _phi(x):
    return sps.norm.cdf(x)


def generate(spec: GeneratorSpec) -> tuple[Panel, GroundTruth]:
    """Simulate a panel and its ground truth.

    Deterministic given ``spec.seed``: identical specs produce
    bit-identical panels.
    """
    window = spec.window
    schema = spec.schema
    stream = RngStream(spec.seed)
    rng = stream.generator("population")

    n, T = spec.n_users, spec.n_weeks
    R = window.n_versions
    p = len(spec.ar_coefs)
    user_ids = [f"u{idx:07d}" for idx in range(n)]

    # --- user-level latents -------------------------------------------------
    z = rng.standard_normal(n)
    activity = np.maximum(
        np.exp(spec.activity_sd * z - 0.5 * spec.activity_sd**2),
        spec.activity_floor,
    )
    rho = spec.early_adopter_link
    speed = rho * z + np.sqrt(max(0.0, 1.0 - rho * rho)) * rng.standard_normal(n)
    h_lo, h_hi = spec.adoption_hazard
    hazard = h_lo + (h_hi - h_lo) * _phi(speed)
    a_lo, a_hi = spec.activity_prob
    act_prob = a_lo + (a_hi - a_lo) * _phi(z)

    virgin = rng.random(n) < spec.virgin_frac
    entry = np.ones(n, dtype=int)
    entry[virgin] = rng.integers(2, T + 1, size=int(virgin.sum()))

    # --- activity calendar --------------------------------------------------
    active = rng.random((n, T)) < act_prob[:, None]
    week_grid = np.arange(1, T + 1)
    active &= week_grid[None, :] >= entry[:, None]
    active[np.arange(n), entry - 1] = True

    # --- version paths ------------------------------------------------------
    latest_col = np.full(T, -1, dtype=int)
    for t in range(1, T + 1):
        latest = window.latest_release_at(t)
        if latest is not None:
            latest_col[t - 1] = window.version_index(latest[0])
    legacy_start = window.version_index(spec.legacy_versions[-1])

    current = np.full(n, legacy_start, dtype=int)
    started = np.zeros(n, dtype=bool)
    path = np.full((n, T), -1, dtype=int)
    upgrade_at = np.zeros((n, T), dtype=bool)
    for t in range(1, T + 1):
        entering = week_grid[t - 1] == entry
        if entering.any():
            start_col = latest_col[t - 1] if latest_col[t - 1] >= 0 else legacy_start
            # Non-virgins enter at week 1; virgins join on the newest release,
            # which counts as their adoption event.
            joins = entering & virgin
            current[joins] = start_col
            if latest_col[t - 1] >= 0:
                upgrade_at[joins, t - 1] = True
            started |= entering
        live = started.copy()
        if latest_col[t - 1] >= 0:
            behind = live & active[:, t - 1] & (current != latest_col[t - 1])
            fires = behind & (rng.random(n) < hazard)
            # A week-one entrant is placed directly, not upgraded.
            fires &= ~entering
            current[fires] = latest_col[t - 1]
            upgrade_at[fires, t - 1] = True
        path[:, t - 1] = np.where(live, current, -1)

    # --- session counts and mid-week splits ---------------------------------
    lam = spec.sessions_mean * (0.5 + 0.5 * activity)
    sessions = np.zeros((n, T), dtype=int)
    sessions[active] = 1 + rng.poisson(np.broadcast_to(lam[:, None], (n, T))[active])
    split_new = np.zeros((n, T), dtype=int)
    upg_active = upgrade_at & active
    n_upg = int(upg_active.sum())
    frac_draw = rng.random(n_upg)
    clean = rng.random(n_upg) < spec.clean_upgrade_frac
    part = 1 + (frac_draw * (sessions[upg_active] - 1)).astype(int)
    split_new[upg_active] = np.where(clean, sessions[upg_active], part)

    sessions_by_version = np.zeros((n, T, R), dtype=int)
    prev_col = np.full(n, -1, dtype=int)
    for t in range(T):
        on = active[:, t] & (path[:, t] >= 0)
        idx = np.flatnonzero(on)
        cols = path[idx, t]
        upg = upgrade_at[idx, t] & (prev_col[idx] >= 0)
        stay = ~upg
        sessions_by_version[idx[stay], t, cols[stay]] = sessions[idx[stay], t]
        if upg.any():
            ui = idx[upg]
            new_k = split_new[ui, t]
            sessions_by_version[ui, t, cols[upg]] = new_k
            sessions_by_version[ui, t, prev_col[ui]] = sessions[ui, t] - new_k
        prev_col[idx] = cols

    usage = np.zeros((n, T, R))
    tot = sessions_by_version.sum(axis=2)
    nz = tot > 0
    usage[nz] = sessions_by_version[nz] / tot[nz][:, None]

    # --- adoption bookkeeping -----------------------------------------------
    adoption_week = {}
    for v, rel_week in window.release_schedule:
        col = window.version_index(v)
        ever = (path == col) & active
        first = np.where(ever.any(axis=1), ever.argmax(axis=1) + 1, 0)
        adoption_week[v] = first

    # --- true coefficients ---------------------------------------------------
    d = schema.d
    if spec.mu_star is not None:
        mu = np.asarray(spec.mu_star, dtype=float)
        if mu.shape != (d,):
            raise ConfigError(f"mu_star must have shape ({d},)")
        sigma = np.zeros((d, d)) if spec.sigma_star is None else np.asarray(spec.sigma_star, dtype=float)
        if np.allclose(sigma, 0.0):
            beta = np.tile(mu, (n, 1))
        else:
            chol = np.linalg.cholesky(sigma + 1e-12 * np.eye(d))
            beta = mu + rng.standard_normal((n, d)) @ chol.T
    else:
        beta = np.zeros((n, d))
        beta[:, schema.lag_slice] = np.asarray(spec.ar_coefs) + 0.005 * rng.standard_normal((n, p))
        level = spec.base_level * activity + spec.version_affinity_sd * rng.standard_normal(n)
        beta[:, schema.version_slice] = level[:, None] + spec.version_jitter_sd * rng.standard_normal((n, R))
        burst = abs(rho) * activity
        beta[:, schema.wait_slice] = burst[:, None] * np.asarray(spec.waiting_decay)
        beta[:, schema.upgrade_col] = spec.upgrade_week_coef * (1 + 0.1 * rng.standard_normal(n))
        beta[:, schema.virgin_col] = spec.virgin_coef
        beta[:, schema.rolling_col] = spec.rolling_coef

    tgrid = np.arange(1, T + 1)
    gamma_star = spec.week_effect_offset + spec.week_effect_amplitude * (
        np.sin(2 * np.pi * tgrid / T) + 0.5 * rng.standard_normal(T)
    )

    theta_labels = theta_values = None
    theta_user = np.zeros(n)
    if spec.error_offsets is not None:
        values, probs = spec.error_offsets
        values = np.asarray(values, dtype=float)
        probs = np.asarray(probs, dtype=float)
        if len(values) != len(probs) or not np.isclose(probs.sum(), 1.0):
            raise ConfigError("error_offsets must be (values, probs) with probs summing to 1")
        theta_labels = rng.choice(len(values), size=n, p=probs)
        theta_values = values
        theta_user = values[theta_labels]

    # --- planted lift schedule ------------------------------------------------
    # Per-user per-week multiplicative factor on the conditional response
    # mean: the planted effect of each release applies to its adopters
    # during its lifetime weeks (lifetimes are disjoint, so factors never
    # stack).  Adoption paths are shared between universes by design.
    lift_fac = np.ones((n, T))
    treated_masks = {}
    for v, rel_week in window.release_schedule:
        start, end = window.lifetime(v)
        adopted = adoption_week[v]
        treated_mask = (adopted >= start) & (adopted <= end)
        treated_masks[v] = treated_mask
        effect = float(spec.planted_effects.get(v, 1.0))
        if effect != 1.0 and treated_mask.any():
            lift_fac[np.ix_(treated_mask, range(start - 1, end))] *= effect

    # --- sequential response generation, both universes -----------------------
    # One pass of common random numbers drives a factual universe (with
    # the planted lifts, feeding its own lags and rolling averages) and a
    # placebo universe (no lifts anywhere).  Noise stays homoskedastic:
    # the lift scales only the conditional mean.
    #
    # Response is generated on every week for every paneled user:
    # business response exists independently of product sessions, so
    # inactive weeks (including a virgin user's pre-activation weeks)
    # contribute nothing through the usage-driven blocks but keep a
    # continuous response, staying inside the response-model class.
    # With ``zero_inflated`` the response is instead hard-zeroed on
    # inactive weeks.
    gate = active if spec.zero_inflated else np.ones((n, T), dtype=bool)
    noise = spec.noise_sd * rng.standard_normal((n, T))
    wait_age = np.full(T, -1, dtype=int)
    for t in range(T):
        latest = window.latest_release_at(t + 1)
        if latest is not None:
            wait_age[t] = t + 1 - latest[1]

    y0 = np.zeros((n, T))   # placebo universe
    y1 = np.zeros((n, T))   # factual universe
    csum0 = np.zeros(n)
    csum1 = np.zeros(n)
    beta_ver = beta[:, schema.version_slice]
    beta_wait = beta[:, schema.wait_slice]
    clip_count = 0
    for t in range(T):
        static = np.einsum("nr,nr->n", usage[:, t, :], beta_ver)
        if wait_age[t] >= 0:
            on_latest = usage[:, t, latest_col[t]] > 0
            static += on_latest * beta_wait[:, wait_age[t]]
        static += upgrade_at[:, t] * beta[:, schema.upgrade_col]
        static += virgin * beta[:, schema.virgin_col]
        static += gamma_star[t] + theta_user
        # csum holds the trailing-window response sum maintained below,
        # matching panel.rolling_average exactly.
        if t > 0:
            denom = min(t, ROLLING_LOOKBACK_WEEKS)
            roll0 = csum0 / denom
            roll1 = csum1 / denom
        else:
            roll0 = roll1 = np.zeros(n)
        mean0 = static + roll0 * beta[:, schema.rolling_col]
        mean1 = static + roll1 * beta[:, schema.rolling_col]
        for j in range(1, p + 1):
            if t - j >= 0:
                mean0 = mean0 + beta[:, j - 1] * y0[:, t - j]
                mean1 = mean1 + beta[:, j - 1] * y1[:, t - j]
        vals0 = mean0 + noise[:, t]
        vals1 = lift_fac[:, t] * mean1 + noise[:, t]
        clip_count += int(np.sum(gate[:, t] & (vals1 < 0)))
        y0[:, t] = np.where(gate[:, t], np.maximum(vals0, 0.0), 0.0)
        y1[:, t] = np.where(gate[:, t], np.maximum(vals1, 0.0), 0.0)
        if t >= ROLLING_LOOKBACK_WEEKS:
            csum0 = csum0 - y0[:, t - ROLLING_LOOKBACK_WEEKS] + y0[:, t]
            csum1 = csum1 - y1[:, t - ROLLING_LOOKBACK_WEEKS] + y1[:, t]
        else:
            csum0 = csum0 + y0[:, t]
            csum1 = csum1 + y1[:, t]

    # --- ground truth ratios ---------------------------------------------------
    true_ccr = {}
    treated_counts = {}
    for v, rel_week in window.release_schedule:
        start, end = window.lifetime(v)
        treated_mask = treated_masks[v]
        treated_counts[v] = int(treated_mask.sum())
        span = slice(start - 1, end)
        if treated_mask.any():
            fact_tot = float(y1[treated_mask, span].sum())
            base_tot = float(y0[treated_mask, span].sum())
            true_ccr[v] = base_tot / fact_tot if fact_tot > 0 else float("nan")
        else:
            true_ccr[v] = float("nan")

    if clip_count:
        logger.info("generator clipped %d negative responses at zero", clip_count)

    # --- panel assembly -------------------------------------------------------
    users = []
    for i, uid in enumerate(user_ids):
        users.append(build_user_record(
            window, uid, sessions_by_version[i], y1[i],
            known_before_window=not virgin[i],
        ))
    panel = Panel(window=window, users=users)

    truth = GroundTruth(
        user_ids=user_ids,
        schema=schema,
        beta_star=beta,
        gamma_star=gamma_star,
        nu_star=spec.noise_sd**2,
        activity=activity,
        adoption_week=adoption_week,
        true_ccr=true_ccr,
        treated_counts=treated_counts,
        theta_labels=theta_labels,
        theta_values=theta_values,
        clip_count=clip_count,
        response_placebo=y0,
    )
    return panel, truth


@dataclass
class AssumptionReport:
    """Checks that the identification story holds on a given panel."""

    decay_spearman: dict
    decay_pass: bool
    adopter_jaccard: dict
    jaccard_mean: float
    repeat_adopter_warning: bool
    notes: list

    @property
    def all_pass(self) -> bool:
        return self.decay_pass and not self.repeat_adopter_warning


def verify_assumptions(panel: Panel, early_weeks: int = 2,
                       decay_weeks: int = 5,
                       jaccard_warn: float = 0.8) -> AssumptionReport:
    """Check the two structural assumptions the estimator leans on.

    1. Decay: mean response among a release's current users falls over
       its first ``decay_weeks`` weeks (Spearman rho < 0).
    2. Rotation: early-adopter sets of consecutive releases overlap
       only moderately (Jaccard below ``jaccard_warn``); if the same
       users always adopt first, version and adopter effects cannot be
       told apart.
    """
    from .diagnostics import adopter_curves

    window = panel.window
    curves = adopter_curves(panel)
    notes = []
    decay_spearman = {}
    decay_ok = True
    for v, rel_week in window.release_schedule:
        # The release week itself is skipped: mid-week upgraders are
        # attributed to the version they started the week on, so that
        # week mixes compositions instead of showing the adopter peak.
        end = min(rel_week + decay_weeks, window.n_weeks)
        weeks = list(range(rel_week + 1, end + 1))
        means = [curves.mean_response.get((v, w), np.nan) for w in weeks]
        valid = [m for m in means if np.isfinite(m)]
        if len(valid) < 3:
            notes.append(f"{v}: too few lifetime weeks to test decay")
            continue
        rho, _ = sps.spearmanr(range(len(valid)), valid)
        decay_spearman[v] = float(rho)
        if rho >= 0:
            decay_ok = False
            notes.append(f"{v}: adopter curve does not decay (spearman {rho:.2f})")

    early_sets = {}
    for v, rel_week in window.release_schedule:
        col = window.version_index(v)
        cutoff = min(rel_week + early_weeks - 1, window.n_weeks)
        users = {
            u.user_id for u in panel.users
            if np.any(u.usage[rel_week - 1 : cutoff, col] > 0)
        }
        early_sets[v] = users
    jaccard = {}
    scheduled = [v for v, _ in window.release_schedule]
    for a, b in zip(scheduled, scheduled[1:]):
        sa, sb = early_sets[a], early_sets[b]
        union = sa | sb
        jaccard[f"{a}->{b}"] = float(len(sa & sb) / len(union)) if union else float("nan")
    vals = [j for j in jaccard.values() if np.isfinite(j)]
    jmean = float(np.mean(vals)) if vals else float("nan")
    warn = bool(np.isfinite(jmean) and jmean > jaccard_warn)
    if warn:
        notes.append(
            f"early-adopter sets repeat across releases (mean jaccard {jmean:.2f}); "
            "adopter and version effects may be confounded"
        )
    return AssumptionReport(
        decay_spearman=decay_spearman,
        decay_pass=decay_ok,
        adopter_jaccard=jaccard,
        jaccard_mean=jmean,
        repeat_adopter_warning=warn,
        notes=notes,
    )

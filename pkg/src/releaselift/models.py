"""Gibbs fitters for the pooled and per-user mixed-effects models.

Two model classes share one response likelihood per user ``i``::

    y_i = f_i beta_i + gamma + e_i,      e_i ~ N(theta_i * 1, nu I)

- The flat fit pools a single ``beta`` across users under the improper
  prior ``p(beta, gamma, nu) ~ 1`` (requires a full-rank pooled design).
- The hierarchical fit gives every user their own ``beta_i`` with
  ``beta_i ~ N(mu, Sigma)``, diffuse Gaussian priors on ``mu`` and
  ``gamma``, an inverse-Wishart prior on ``Sigma`` and an inverse-gamma
  prior on ``nu``.  ``theta_i`` is zero under the Gaussian error model;
  under the Dirichlet-process error model user offsets are clustered
  via a marginal Gibbs scan with a Gaussian base measure.

Sweep order: every ``beta_i`` (batched across users), then ``gamma``,
``mu``, ``Sigma``, ``nu``, then (DP only) cluster assignments and
cluster offsets.  The ``beta_i`` pass uses the previous sweep's
globals; global updates see the freshly drawn coefficients.

All randomness is drawn from counter-based substreams keyed by
``(seed, role, user_id, chunk)``, so results are invariant to user
ordering, sharding, and thread scheduling, and a checkpoint needs only
the sweep index plus current state to resume bit-identically.
"""

from __future__ import annotations

import logging
import pickle
from dataclasses import dataclass, field

import numpy as np

from .design import ColumnSchema, DesignPair
from .errors import ConfigError, IdentifiabilityError, NumericalError
from .samplers import RngStream, SufficientStats, chol_spd, draw_inv_gamma, draw_inv_wishart

logger = logging.getLogger(__name__)

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency normally
    _HAVE_NUMBA = False

# Sweeps of per-user variates drawn per substream instantiation.
RNG_CHUNK = 32

CHECKPOINT_FORMAT = "releaselift-checkpoint/1"


@dataclass(frozen=True)
class Hyperparams:
    """Prior constants for the hierarchical model."""

    kappa_mu: float = 1e6
    kappa_gamma: float = 1e6
    nu_eps: float = 1e-3
    dp_alpha: float = 3.0
    dp_tau0: float = 100.0

    def __post_init__(self):
        if min(self.kappa_mu, self.kappa_gamma, self.nu_eps) <= 0:
            raise ConfigError("prior scale constants must be positive")
        if self.dp_alpha <= 0 or self.dp_tau0 <= 0:
            raise ConfigError("DP concentration and base variance must be positive")


@dataclass(frozen=True)
class GibbsPlan:
    """Chain schedule. Total sweeps = burn_in + keep * thin."""

    burn_in: int = 1000
    keep: int = 2000
    thin: int = 1
    checkpoint_every: int | None = None
    checkpoint_path: str | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if self.burn_in < 0 or self.keep < 1 or self.thin < 1:
            raise ConfigError("invalid chain plan")
        if self.checkpoint_every is not None and self.checkpoint_path is None:
            raise ConfigError("checkpoint_every set without checkpoint_path")

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.keep * self.thin


@dataclass
class PosteriorSummary:
    """Kept-draw summaries of one fitted chain.

    ``beta_bar`` is the running mean of per-user coefficient draws over
    kept sweeps only.  Global parameters keep their full kept-draw
    traces; their posterior means are exposed as properties.
    """

    model: str
    user_ids: list
    first_week: int
    schema_d: int
    beta_bar: np.ndarray
    mu_draws: np.ndarray
    sigma_draws: np.ndarray
    gamma_draws: np.ndarray
    nu_draws: np.ndarray
    seed: int
    theta_bar: np.ndarray | None = None
    cluster_counts: np.ndarray | None = None
    final_assignments: np.ndarray | None = None
    final_theta: np.ndarray | None = None

    @property
    def mu_bar(self):
        return self.mu_draws.mean(axis=0)

    @property
    def sigma_bar(self):
        return self.sigma_draws.mean(axis=0)

    @property
    def gamma_bar(self):
        return self.gamma_draws.mean(axis=0)

    @property
    def nu_bar(self):
        return float(self.nu_draws.mean())

    @property
    def n_weeks(self) -> int:
        return self.gamma_draws.shape[1]

    def user_index(self, user_id) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise ConfigError(f"user {user_id!r} not in fitted posterior") from None


def _stack_designs(designs: list[DesignPair]):
    if not designs:
        raise ConfigError("no designs to fit")
    order = sorted(range(len(designs)), key=lambda i: designs[i].user_id)
    designs = [designs[i] for i in order]
    first = designs[0]
    for dp in designs:
        if dp.n_rows != first.n_rows or dp.first_week != first.first_week:
            raise ConfigError(
                "designs must cover identical week rows; slice them to a "
                "common window first"
            )
    Y = np.stack([dp.y for dp in designs])
    F = np.stack([dp.f for dp in designs])
    ids = [dp.user_id for dp in designs]
    return ids, Y, F, first.first_week


def _per_user_pool(stream: RngStream, role: str, user_ids, chunk_idx: int, shape_per_sweep):
    """Stack of per-user variates for sweeps in one chunk, keyed so the
    k-th sweep's draw for a user is independent of everything else."""
    pools = np.empty((len(user_ids), RNG_CHUNK) + shape_per_sweep)
    for j, uid in enumerate(user_ids):
        gen = stream.generator(role, uid, chunk_idx)
        pools[j] = gen.standard_normal((RNG_CHUNK,) + shape_per_sweep)
    return pools


def _per_user_uniform_pool(stream: RngStream, role: str, user_ids, chunk_idx: int):
    pools = np.empty((len(user_ids), RNG_CHUNK))
    for j, uid in enumerate(user_ids):
        gen = stream.generator(role, uid, chunk_idx)
        pools[j] = gen.random(RNG_CHUNK)
    return pools


# ---------------------------------------------------------------------------
# Dirichlet-process allocation scan.

def _dp_scan_py(assign, counts, theta, n_active, eps_bar, W, nu, alpha, tau0,
                unif, norm):
    n = assign.shape[0]
    log_alpha = np.log(alpha)
    base = W * tau0 + nu
    logw = np.zeros(n + 1)
    for i in range(n):
        old = assign[i]
        counts[old] -= 1
        e = eps_bar[i]
        best = -np.inf
        for c in range(n_active):
            if counts[c] <= 0:
                continue
            t = theta[c]
            logw[c] = np.log(counts[c]) + (2.0 * t * W * e - W * t * t) / (2.0 * nu)
            if logw[c] > best:
                best = logw[c]
        lw_new = log_alpha + 0.5 * np.log(nu / base) + tau0 * W * W * e * e / (2.0 * nu * base)
        if lw_new > best:
            best = lw_new
        total = 0.0
        for c in range(n_active):
            if counts[c] > 0:
                logw[c] = np.exp(logw[c] - best)
                total += logw[c]
            else:
                logw[c] = 0.0
        w_new = np.exp(lw_new - best)
        total += w_new
        u = unif[i] * total
        chosen = -1
        acc = 0.0
        for c in range(n_active):
            acc += logw[c]
            if u <= acc and logw[c] > 0.0:
                chosen = c
                break
        if chosen < 0:
            # Open a new cluster in the first free slot.
            slot = -1
            for c in range(n_active):
                if counts[c] == 0:
                    slot = c
                    break
            if slot < 0:
                slot = n_active
                n_active += 1
            b = 1.0 / (1.0 / tau0 + W / nu)
            a = b * W * e / nu
            theta[slot] = a + np.sqrt(b) * norm[i]
            chosen = slot
        counts[chosen] += 1
        assign[i] = chosen
    return n_active


if _HAVE_NUMBA:
    _dp_scan = numba.njit(cache=True)(_dp_scan_py)
else:  # pragma: no cover
    _dp_scan = _dp_scan_py


def _compact_clusters(assign, counts, theta, n_active):
    """Drop empty slots; relabel in ascending slot order."""
    live = [c for c in range(n_active) if counts[c] > 0]
    remap = np.full(n_active, -1, dtype=np.int64)
    for new, old in enumerate(live):
        remap[old] = new
    assign[:] = remap[assign]
    new_counts = np.zeros_like(counts)
    new_theta = np.zeros_like(theta)
    for new, old in enumerate(live):
        new_counts[new] = counts[old]
        new_theta[new] = theta[old]
    counts[:] = new_counts
    theta[:] = new_theta
    return len(live)


# ---------------------------------------------------------------------------
# Hierarchical fit.

# Pilot-chain start: panels at or above this many users warm-start from
# a subsampled chain (see the note inside fit_hierarchical).
_PILOT_MIN_USERS = 1200
_PILOT_SIZE = 400
_PILOT_BURN_IN = 1200
_PILOT_KEEP = 64


def _empirical_start(F, G, Y, schema: ColumnSchema):
    """Deterministic data-driven starting values for the global state.

    The response-history columns (lags and the trailing average) are
    near self-regressions of the response, so a pooled fit over the
    full design dumps the between-user level variation into them;
    a chain started there has to walk that level mass back into the
    per-user static coefficients one small conditional step at a time,
    which takes thousands of sweeps.  Starting instead from a pooled
    ridge over the static columns only — history coefficients at zero,
    with a tight starting scale matching their stationary shrinkage
    floor — puts the chain inside the geometry it converges to.  Only
    the starting point changes; every conditional drawn afterwards is
    unchanged.
    """
    n, W, d = F.shape
    gamma = Y.mean(axis=0)
    resid0 = Y - gamma
    ls = schema.lag_slice
    dyn = list(range(ls.start, ls.stop)) + [schema.rolling_col]
    stat = [j for j in range(d) if j not in dyn]
    A = G.sum(axis=0)
    b = np.einsum("nwd,nw->d", F, resid0)
    mu = np.zeros(d)
    if stat:
        As = A[np.ix_(stat, stat)]
        mu[stat] = np.linalg.solve(As + 1e-6 * np.eye(len(stat)), b[stat])
    fitted0 = F @ mu + gamma
    nu = max(float(np.mean((Y - fitted0) ** 2)), 1e-8)
    # Static columns start generous (per-column scale matched to the
    # residual variance); history columns start at the shrinkage floor
    # their covariance settles into under the prior scale.
    col_mass = G.mean(axis=0).diagonal() / W
    diag = 0.5 * nu / np.maximum(col_mass, 1e-9)
    diag = np.clip(diag, 1e-2, 1e4)
    diag[dyn] = max(1.0 / max(n, 1), 1e-6)
    return gamma, nu, mu, np.diag(diag)


def fit_hierarchical(designs: list[DesignPair], schema: ColumnSchema, *,
                     seed: int, plan: GibbsPlan = GibbsPlan(),
                     hyper: Hyperparams = Hyperparams(),
                     error_model: str = "gaussian",
                     fixed: dict | None = None,
                     _resume_state: dict | None = None) -> PosteriorSummary:
    """Fit the per-user mixed-effects model by Gibbs sampling.

    Parameters
    ----------
    error_model : "gaussian" or "dp_mixture"
    fixed : optional dict pinning any of "mu", "sigma", "gamma", "nu"
        to constants (their update steps are skipped); used by
        calibration tests and sensitivity checks.
    """
    if error_model not in ("gaussian", "dp_mixture"):
        raise ConfigError(f"unknown error model {error_model!r}")
    if error_model == "dp_mixture" and not _HAVE_NUMBA:
        logger.warning("numba unavailable; DP scan will run in pure python")

    fixed = dict(fixed or {})
    ids, Y, F, first_week = _stack_designs(designs)
    n, W, d = F.shape[0], F.shape[1], F.shape[2]
    if d != schema.d:
        raise ConfigError("design width does not match schema")
    stream = RngStream(seed)

    # Fixed per-user pieces.
    FT = F.transpose(0, 2, 1)
    G = np.matmul(FT, F)
    FtY = np.matmul(FT, Y[:, :, None])[:, :, 0]
    Ft1 = F.sum(axis=1)
    eye_d = np.eye(d)

    # State (possibly resumed).
    if _resume_state is None:
        gamma0, nu0_, mu0, sigma0 = _empirical_start(F, G, Y, schema)
        if not fixed and n >= _PILOT_MIN_USERS:
            # The trailing-average column nearly duplicates each user's
            # static level, so the chain relaxes along that ridge with
            # conditional steps that shrink as 1/n — prohibitively slow
            # at full scale.  A small deterministic pilot chain mixes
            # through the same ridge in a few hundred sweeps; its
            # converged globals start the full chain past the transient.
            idx = np.linspace(0, len(designs) - 1, _PILOT_SIZE).astype(int)
            sub = [designs[i] for i in sorted(set(idx.tolist()))]
            pilot = fit_hierarchical(
                sub, schema, seed=seed + 0x5F3759DF,
                plan=GibbsPlan(burn_in=_PILOT_BURN_IN, keep=_PILOT_KEEP),
                hyper=hyper)
            gamma0 = pilot.gamma_bar
            nu0_ = float(pilot.nu_bar)
            mu0 = pilot.mu_bar
            sigma0 = pilot.sigma_bar
        gamma = np.asarray(fixed.get("gamma", gamma0), dtype=float).copy()
        nu = float(fixed.get("nu", nu0_))
        mu = np.asarray(fixed.get("mu", mu0), dtype=float).copy()
        sigma = np.asarray(fixed.get("sigma", sigma0), dtype=float).copy()
        theta_user = np.zeros(n)
        assign = np.zeros(n, dtype=np.int64)
        counts = np.zeros(n + 1, dtype=np.int64)
        counts[0] = n
        theta_slots = np.zeros(n + 1)
        n_active = 1
        start_sweep = 0
        kept = 0
        beta_bar_acc = np.zeros((n, d))
        beta_bar_comp = np.zeros((n, d))
        theta_bar_acc = np.zeros(n)
        M = plan.keep
        mu_draws = np.zeros((M, d))
        sigma_draws = np.zeros((M, d, d))
        gamma_draws = np.zeros((M, W))
        nu_draws = np.zeros(M)
        cluster_counts = np.zeros(M, dtype=np.int64)
        trace_rows = []
    else:
        st = _resume_state
        gamma, nu, mu, sigma = st["gamma"], st["nu"], st["mu"], st["sigma"]
        theta_user, assign, counts = st["theta_user"], st["assign"], st["counts"]
        theta_slots, n_active = st["theta_slots"], st["n_active"]
        start_sweep, kept = st["sweep"], st["kept"]
        beta_bar_acc, beta_bar_comp = st["beta_bar_acc"], st["beta_bar_comp"]
        theta_bar_acc = st["theta_bar_acc"]
        mu_draws, sigma_draws = st["mu_draws"], st["sigma_draws"]
        gamma_draws, nu_draws = st["gamma_draws"], st["nu_draws"]
        cluster_counts = st["cluster_counts"]
        trace_rows = st["trace_rows"]

    nu0 = nu if nu > 0 else 1.0
    dp = error_model == "dp_mixture"
    beta_pool = None
    dpu_pool = None
    dpn_pool = None
    pool_chunk = -1

    for sweep in range(start_sweep, plan.total_sweeps):
        chunk_idx, offset = divmod(sweep, RNG_CHUNK)
        if chunk_idx != pool_chunk:
            beta_pool = _per_user_pool(stream, "beta", ids, chunk_idx, (d,))
            if dp:
                dpu_pool = _per_user_uniform_pool(stream, "dp-alloc", ids, chunk_idx)
                dpn_pool = _per_user_pool(stream, "dp-theta", ids, chunk_idx, ())
            pool_chunk = chunk_idx
        g_global = stream.generator("globals", sweep)

        # --- beta_i for all users (previous sweep's globals) ---------------
        sigma_chol = chol_spd(sigma, "Sigma")
        half = np.linalg.solve(sigma_chol, eye_d)
        sigma_inv = half.T @ half
        rhs = (FtY - np.matmul(FT, gamma)) / nu
        if dp:
            rhs -= Ft1 * (theta_user / nu)[:, None]
        rhs += sigma_inv @ mu
        precision = sigma_inv[None, :, :] + G / nu
        L = chol_spd(precision, "beta posterior precision")
        u = np.linalg.solve(L, rhs[:, :, None])
        z = beta_pool[:, offset, :]
        beta = np.linalg.solve(np.swapaxes(L, 1, 2), u + z[:, :, None])[:, :, 0]

        yhat = np.matmul(F, beta[:, :, None])[:, :, 0]
        resid = Y - yhat
        resid_rowsum = resid.sum(axis=1)

        stats = SufficientStats(d=d, n_weeks=W)
        for lo in range(0, n, 2048):
            hi = min(lo + 2048, n)
            block = SufficientStats(d=d, n_weeks=W)
            block.accumulate(beta[lo:hi], resid[lo:hi])
            stats.merge(block)

        # --- gamma -----------------------------------------------------------
        if "gamma" not in fixed:
            dvar = 1.0 / (n / nu + 1.0 / hyper.kappa_gamma)
            rhs_g = stats.sum_resid - (theta_user.sum() if dp else 0.0)
            gamma = dvar / nu * rhs_g + np.sqrt(dvar) * g_global.standard_normal(W)

        # --- mu ---------------------------------------------------------------
        beta_mean = stats.beta_mean
        if "mu" not in fixed:
            prec_mu = eye_d / hyper.kappa_mu + n * sigma_inv
            Lmu = chol_spd(prec_mu, "mu posterior precision")
            rhs_mu = n * (sigma_inv @ beta_mean)
            half_mu = np.linalg.solve(Lmu, rhs_mu)
            mu = np.linalg.solve(Lmu.T, half_mu + g_global.standard_normal(d))

        # --- Sigma -------------------------------------------------------------
        if "sigma" not in fixed:
            scatter = stats.scatter_about(mu)
            sigma = draw_inv_wishart(n + d + 1, scatter + eye_d, g_global)

        # --- nu ------------------------------------------------------------------
        if "nu" not in fixed:
            sse = stats.sse_about(gamma)
            if dp:
                s_i = resid_rowsum - gamma.sum()
                sse += -2.0 * float(theta_user @ s_i) + W * float(theta_user @ theta_user)
            shape = (hyper.nu_eps + n * W) / 2.0
            rate = (hyper.nu_eps + sse) / 2.0
            nu = float(draw_inv_gamma(shape, rate, g_global))
            if not np.isfinite(nu) or nu > 1e12 * nu0:
                raise NumericalError(f"divergent noise variance at sweep {sweep}: nu={nu:.3e}")

        # --- DP clustering -----------------------------------------------------
        if dp:
            eps_bar = (resid_rowsum - gamma.sum()) / W
            n_active = int(_dp_scan(
                assign, counts, theta_slots, n_active, eps_bar, float(W), nu,
                hyper.dp_alpha, hyper.dp_tau0,
                dpu_pool[:, offset], dpn_pool[:, offset],
            ))
            n_active = _compact_clusters(assign, counts, theta_slots, n_active)
            sums = np.bincount(assign, weights=eps_bar, minlength=n_active)[:n_active]
            members = counts[:n_active].astype(float)
            b_c = 1.0 / (1.0 / hyper.dp_tau0 + W * members / nu)
            a_c = b_c * W * sums / nu
            theta_slots[:n_active] = a_c + np.sqrt(b_c) * g_global.standard_normal(n_active)
            theta_user = theta_slots[assign]

        # --- bookkeeping ---------------------------------------------------------
        is_kept = sweep >= plan.burn_in and (sweep - plan.burn_in) % plan.thin == 0
        if is_kept:
            delta = beta - beta_bar_comp
            total = beta_bar_acc + delta
            beta_bar_comp = (total - beta_bar_acc) - delta
            beta_bar_acc = total
            if dp:
                theta_bar_acc = theta_bar_acc + theta_user
            mu_draws[kept] = mu
            sigma_draws[kept] = sigma
            gamma_draws[kept] = gamma
            nu_draws[kept] = nu
            cluster_counts[kept] = n_active if dp else 1
            kept += 1
        if plan.trace_path is not None:
            trace_rows.append((sweep, nu, float(np.linalg.norm(mu)), n_active if dp else 1))

        if (plan.checkpoint_every is not None
                and (sweep + 1) % plan.checkpoint_every == 0
                and sweep + 1 < plan.total_sweeps):
            _write_checkpoint(plan.checkpoint_path, {
                "format": CHECKPOINT_FORMAT,
                "model": "hier_dp" if dp else "hier_gaussian",
                "seed": seed, "plan": plan, "hyper": hyper, "fixed": fixed,
                "error_model": error_model, "user_ids": ids,
                "sweep": sweep + 1, "kept": kept,
                "gamma": gamma, "nu": nu, "mu": mu, "sigma": sigma,
                "theta_user": theta_user, "assign": assign, "counts": counts,
                "theta_slots": theta_slots, "n_active": n_active,
                "beta_bar_acc": beta_bar_acc, "beta_bar_comp": beta_bar_comp,
                "theta_bar_acc": theta_bar_acc,
                "mu_draws": mu_draws, "sigma_draws": sigma_draws,
                "gamma_draws": gamma_draws, "nu_draws": nu_draws,
                "cluster_counts": cluster_counts, "trace_rows": trace_rows,
            })

    if plan.trace_path is not None:
        _write_trace(plan.trace_path, trace_rows)

    return PosteriorSummary(
        model="hier_dp" if dp else "hier_gaussian",
        user_ids=ids,
        first_week=first_week,
        schema_d=d,
        beta_bar=beta_bar_acc / kept,
        mu_draws=mu_draws,
        sigma_draws=sigma_draws,
        gamma_draws=gamma_draws,
        nu_draws=nu_draws,
        seed=seed,
        theta_bar=(theta_bar_acc / kept) if dp else None,
        cluster_counts=cluster_counts if dp else None,
        final_assignments=assign.copy() if dp else None,
        final_theta=theta_slots[: n_active].copy() if dp else None,
    )


# ---------------------------------------------------------------------------
# Flat (pooled) fit.

def fit_flat(designs: list[DesignPair], schema: ColumnSchema, *,
             seed: int, plan: GibbsPlan = GibbsPlan(),
             fixed: dict | None = None) -> PosteriorSummary:
    """Fit the pooled single-coefficient model under a flat prior.

    Raises :class:`IdentifiabilityError` naming (near) collinear
    columns when the pooled design, including the week-effect block, is
    rank deficient, since the improper prior then yields no posterior.
    ``fixed`` may pin ``"gamma"`` (length-``W`` vector or scalar) and/or
    ``"nu"``, removing them from the scan; a pinned week block is also
    excluded from the rank check.
    """
    fixed = dict(fixed or {})
    unknown = set(fixed) - {"gamma", "nu"}
    if unknown:
        raise ConfigError(f"fit_flat cannot fix {sorted(unknown)}")

    ids, Y, F, first_week = _stack_designs(designs)
    n, W, d = F.shape
    if d != schema.d:
        raise ConfigError("design width does not match schema")

    F2 = F.reshape(-1, d)
    Gp = F2.T @ F2
    FtY_p = F2.T @ Y.ravel()
    Fsum = F.sum(axis=0)              # (W, d)
    Ysum = Y.sum(axis=0)              # (W,)
    yy = float(Y.ravel() @ Y.ravel())

    gamma_free = "gamma" not in fixed
    nu_free = "nu" not in fixed
    names = list(schema.column_names)
    if gamma_free:
        names += [f"week_{first_week + w}" for w in range(W)]
        M_joint = np.zeros((d + W, d + W))
        M_joint[:d, :d] = Gp
        M_joint[:d, d:] = Fsum.T
        M_joint[d:, :d] = Fsum
        M_joint[d:, d:] = n * np.eye(W)
    else:
        M_joint = Gp
    eigvals, eigvecs = np.linalg.eigh(M_joint)
    if eigvals[0] < 1e-10 * max(eigvals[-1], 1.0):
        null = eigvecs[:, 0]
        loaded = np.argsort(-np.abs(null))[:4]
        cols = ", ".join(names[int(i)] for i in loaded if abs(null[int(i)]) > 1e-3)
        raise IdentifiabilityError(
            f"pooled design is rank deficient; collinear columns: {cols}"
        )

    L_g = chol_spd(Gp, "pooled Gram")
    stream = RngStream(seed)

    if gamma_free:
        gamma = Y.mean(axis=0)
    else:
        gamma = np.broadcast_to(np.asarray(fixed["gamma"], dtype=float), (W,)).copy()
    if nu_free:
        nu = float(max(np.var(Y - gamma), 1e-8))
    else:
        nu = float(fixed["nu"])
        if nu <= 0:
            raise ConfigError("fixed nu must be positive")
    nu0 = nu
    M = plan.keep
    beta_draws = np.zeros((M, d))
    gamma_draws = np.zeros((M, W))
    nu_draws = np.zeros(M)
    kept = 0
    beta = np.zeros(d)

    for sweep in range(plan.total_sweeps):
        g = stream.generator("globals", sweep)
        rhs = FtY_p - Fsum.T @ gamma
        half = np.linalg.solve(L_g, rhs)
        mean = np.linalg.solve(L_g.T, half)
        beta = mean + np.sqrt(nu) * np.linalg.solve(L_g.T, g.standard_normal(d))
        if gamma_free:
            resid_week = Ysum - Fsum @ beta
            gamma = resid_week / n + np.sqrt(nu / n) * g.standard_normal(W)
        if nu_free:
            sse = (
                yy - 2.0 * beta @ FtY_p + beta @ Gp @ beta
                - 2.0 * gamma @ (Ysum - Fsum @ beta) + n * gamma @ gamma
            )
            shape = n * W / 2.0 - 1.0
            nu = float(draw_inv_gamma(shape, max(sse, 1e-12) / 2.0, g))
            if not np.isfinite(nu) or nu > 1e12 * nu0:
                raise NumericalError(
                    f"divergent noise variance at sweep {sweep}: nu={nu:.3e}"
                )
        if sweep >= plan.burn_in and (sweep - plan.burn_in) % plan.thin == 0:
            beta_draws[kept] = beta
            gamma_draws[kept] = gamma
            nu_draws[kept] = nu
            kept += 1

    beta_bar = beta_draws.mean(axis=0)
    return PosteriorSummary(
        model="flat",
        user_ids=ids,
        first_week=first_week,
        schema_d=d,
        beta_bar=np.tile(beta_bar, (n, 1)),
        mu_draws=beta_draws,
        sigma_draws=np.zeros((0, d, d)),
        gamma_draws=gamma_draws,
        nu_draws=nu_draws,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Persistence.

POSTERIOR_FORMAT = "releaselift-posterior/1"


def save_posterior(path, summary: PosteriorSummary, *, window_dict: dict | None = None,
                   ar_order: int | None = None, include_waiting: bool = True) -> None:
    """Write a fitted posterior to a single ``.npz`` archive.

    ``window_dict``, ``ar_order`` and ``include_waiting`` travel with
    the fit so downstream commands can rebuild matching designs from
    the raw panel alone.
    """
    import json as _json

    meta = {
        "format": POSTERIOR_FORMAT,
        "model": summary.model,
        "user_ids": summary.user_ids,
        "first_week": summary.first_week,
        "schema_d": summary.schema_d,
        "seed": summary.seed,
        "window": window_dict,
        "ar_order": ar_order,
        "include_waiting": include_waiting,
    }
    arrays = {
        "meta_json": np.array(_json.dumps(meta, sort_keys=True)),
        "beta_bar": summary.beta_bar,
        "mu_draws": summary.mu_draws,
        "sigma_draws": summary.sigma_draws,
        "gamma_draws": summary.gamma_draws,
        "nu_draws": summary.nu_draws,
    }
    for name in ("theta_bar", "cluster_counts", "final_assignments", "final_theta"):
        val = getattr(summary, name)
        if val is not None:
            arrays[name] = val
    np.savez(path, **arrays)


def load_posterior(path):
    """Read a posterior archive; returns (PosteriorSummary, meta dict)."""
    import json as _json

    with np.load(path, allow_pickle=False) as data:
        try:
            meta = _json.loads(str(data["meta_json"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"not a posterior archive: {path}") from exc
        if meta.get("format") != POSTERIOR_FORMAT:
            raise ConfigError(f"unrecognized posterior format {meta.get('format')!r}")
        opt = {name: (data[name] if name in data.files else None)
               for name in ("theta_bar", "cluster_counts", "final_assignments",
                            "final_theta")}
        summary = PosteriorSummary(
            model=meta["model"],
            user_ids=meta["user_ids"],
            first_week=int(meta["first_week"]),
            schema_d=int(meta["schema_d"]),
            beta_bar=data["beta_bar"],
            mu_draws=data["mu_draws"],
            sigma_draws=data["sigma_draws"],
            gamma_draws=data["gamma_draws"],
            nu_draws=data["nu_draws"],
            seed=int(meta["seed"]),
            **opt,
        )
    return summary, meta


# ---------------------------------------------------------------------------
# Checkpointing.

def _write_checkpoint(path, state) -> None:
    with open(path, "wb") as fh:
        pickle.dump(state, fh, protocol=4)


def _write_trace(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("sweep,nu,mu_norm,n_clusters\n")
        for sweep, nu, mu_norm, k in rows:
            fh.write(f"{sweep},{nu!r},{mu_norm!r},{k}\n")


def resume_fit(checkpoint_path, designs: list[DesignPair],
               schema: ColumnSchema) -> PosteriorSummary:
    """Continue an interrupted hierarchical fit from a checkpoint.

    The result is bit-identical to the uninterrupted run because all
    substreams are counter-keyed by sweep index.
    """
    with open(checkpoint_path, "rb") as fh:
        state = pickle.load(fh)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unrecognized checkpoint format {state.get('format')!r}")
    ids = sorted(dp.user_id for dp in designs)
    if ids != state["user_ids"]:
        raise ConfigError("checkpoint user set does not match supplied designs")
    return fit_hierarchical(
        designs, schema,
        seed=state["seed"], plan=state["plan"], hyper=state["hyper"],
        error_model=state["error_model"], fixed=state["fixed"],
        _resume_state=state,
    )

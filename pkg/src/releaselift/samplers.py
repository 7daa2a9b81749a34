"""Low-level sampling primitives used by the Gibbs fitters.

Everything here is deterministic given a seed: random draws flow
through counter-based Philox substreams keyed by ``(seed, *path)``, so
a draw made for one user never depends on how many other users were
processed before it, or on the thread schedule of the caller.

Matrix draws factor through Cholesky decompositions with an escalating
diagonal jitter ladder; solves go through the factorization, never an
explicit inverse.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import SpdError

# Relative jitter ladder applied to near-SPD matrices before giving up.
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)


def _path_to_ints(path):
    """Normalize a mixed int/str key path into 64-bit words."""
    words = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=8)
            words.append(int.from_bytes(digest.digest(), "little"))
    return words


class RngStream:
    """Root of a tree of reproducible random substreams.

    ``RngStream(seed).generator("beta", user_id)`` always yields a
    generator whose k-th variate depends only on
    ``(seed, "beta", user_id, k)``.  Substreams are therefore stable
    under any reordering or parallel scheduling of the surrounding
    computation.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, *path) -> np.random.Generator:
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + _path_to_ints(path)
        seq = np.random.SeedSequence(entropy)
        return np.random.Generator(np.random.Philox(seq))

    def child(self, *path) -> "RngStream":
        """Derive a nested stream root (e.g. one per simulation)."""
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + _path_to_ints(path)
        digest = np.random.SeedSequence(entropy).generate_state(2, np.uint64)
        return RngStream(int(digest[0]))


def chol_spd(mat: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Cholesky factor of an SPD matrix (or a stack of them), with a
    jitter ladder fallback.

    Jitter is scaled by the mean diagonal magnitude so the ladder is
    unit free.  Raises :class:`SpdError` with a condition estimate if
    the largest jitter still fails.
    """
    mat = np.asarray(mat, dtype=float)
    d = mat.shape[-1]
    scale = np.mean(np.abs(np.diagonal(mat, axis1=-2, axis2=-1)), axis=-1)
    scale = np.maximum(scale, 1.0)
    eye = np.eye(d)
    for jitter in JITTER_LADDER:
        try:
            bump = jitter * scale if np.ndim(scale) == 0 else jitter * scale[..., None, None]
            return np.linalg.cholesky(mat + bump * eye)
        except np.linalg.LinAlgError:
            continue
    # Condition estimate on the first offending matrix for the message.
    flat = mat.reshape(-1, d, d)
    worst = np.inf
    for m in flat:
        eigvals = np.linalg.eigvalsh(0.5 * (m + m.T))
        if eigvals[0] <= 0:
            worst = eigvals[-1] / max(abs(eigvals[0]), np.finfo(float).tiny)
            break
    raise SpdError(
        f"{what} is not SPD after jitter ladder {JITTER_LADDER}; "
        f"condition estimate {worst:.3e}"
    )


def draw_mvn(mean, cov, rng, size=None, chol=None):
    """Draw from N(mean, cov) via the lower Cholesky factor.

    Parameters
    ----------
    mean : (d,) array
    cov : (d, d) SPD array; ignored when ``chol`` is given.
    rng : np.random.Generator
    size : optional int, number of draws; None means a single (d,) draw.
    chol : optional precomputed lower factor of ``cov``.
    """
    mean = np.asarray(mean, dtype=float)
    if chol is None:
        chol = chol_spd(cov, "covariance")
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, mean.shape[0]))
    draws = mean + z @ chol.T
    return draws[0] if size is None else draws


def draw_inv_wishart(df: float, scale: np.ndarray, rng) -> np.ndarray:
    """Inverse-Wishart draw with SPD validation of the scale matrix.

    ``df`` must exceed ``d - 1``.  The scale matrix is symmetrized and
    passed through the jitter ladder before sampling.
    """
    scale = np.asarray(scale, dtype=float)
    scale = 0.5 * (scale + scale.T)
    d = scale.shape[0]
    if df <= d - 1:
        raise SpdError(f"inverse-Wishart df {df} must exceed d - 1 = {d - 1}")
    chol = chol_spd(scale, "inverse-Wishart scale")
    # Re-assemble from the validated factor so the jitter (if any) sticks.
    scale = chol @ chol.T
    draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    return np.atleast_2d(draw)


def draw_inv_gamma(shape: float, rate: float, rng, size=None):
    """Inverse-gamma draw(s); density proportional to
    ``x**-(shape+1) * exp(-rate / x)`` so the mean is rate / (shape - 1).
    """
    if shape <= 0 or rate <= 0:
        raise SpdError(f"inverse-gamma requires positive shape/rate, got {shape}, {rate}")
    g = rng.gamma(shape, 1.0, size=size)
    return rate / g


def conjugate_beta_update(y, f, w_gamma, mu, sigma, nu):
    """Posterior moments of one user's coefficient vector.

    For the conditional model ``y = f @ beta + w_gamma + N(0, nu I)``
    with prior ``beta ~ N(mu, sigma)``::

        C = (sigma^-1 + f'f / nu)^-1
        m = C (f'(y - w_gamma) / nu + sigma^-1 mu)

    Returns ``(m, C)``.  Both solves go through Cholesky factors.
    """
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma_chol = chol_spd(np.asarray(sigma, dtype=float), "coefficient prior covariance")
    d = mu.shape[0]
    sigma_inv = np.linalg.solve(sigma_chol @ sigma_chol.T, np.eye(d))
    precision = sigma_inv + (f.T @ f) / nu
    prec_chol = chol_spd(precision, "coefficient posterior precision")
    rhs = f.T @ (y - w_gamma) / nu + sigma_inv @ mu
    half = np.linalg.solve(prec_chol, rhs)
    m = np.linalg.solve(prec_chol.T, half)
    half_eye = np.linalg.solve(prec_chol, np.eye(d))
    cov = half_eye.T @ half_eye
    return m, cov


class _KahanArray:
    """Compensated accumulator for one array-shaped statistic."""

    __slots__ = ("total", "comp")

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, value):
        value = np.asarray(value, dtype=float)
        y = value - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t

    def merge(self, other):
        self.add(other.total)
        self.add(-other.comp)


@dataclass
class SufficientStats:
    """Per-sweep reductions over users needed by the global updates.

    Accumulates, with compensated (Kahan) summation:

    - ``n``: user count
    - ``sum_beta``: sum of coefficient vectors
    - ``sum_outer``: sum of outer products ``beta beta'``
    - ``sum_resid``: weekly sums of ``y - f beta`` across users
    - ``sum_resid_sq``: sum of squared residual norms

    ``merge`` is associative up to float rounding, so users may be
    accumulated in shards, in any grouping, on any schedule.
    """

    d: int
    n_weeks: int
    n: int = 0
    _beta: _KahanArray = field(init=False)
    _outer: _KahanArray = field(init=False)
    _resid: _KahanArray = field(init=False)
    _resid_sq: _KahanArray = field(init=False)

    def __post_init__(self):
        self._beta = _KahanArray(self.d)
        self._outer = _KahanArray((self.d, self.d))
        self._resid = _KahanArray(self.n_weeks)
        self._resid_sq = _KahanArray(())

    def accumulate(self, beta, resid):
        """Add a block of users. ``beta``: (m, d); ``resid``: (m, n_weeks)."""
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        resid = np.atleast_2d(np.asarray(resid, dtype=float))
        if beta.shape[0] != resid.shape[0]:
            raise ValueError("beta and resid blocks must cover the same users")
        self.n += beta.shape[0]
        self._beta.add(beta.sum(axis=0))
        self._outer.add(beta.T @ beta)
        self._resid.add(resid.sum(axis=0))
        self._resid_sq.add(float(np.einsum("ij,ij->", resid, resid)))

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        if (self.d, self.n_weeks) != (other.d, other.n_weeks):
            raise ValueError("cannot merge stats with different shapes")
        self.n += other.n
        self._beta.merge(other._beta)
        self._outer.merge(other._outer)
        self._resid.merge(other._resid)
        self._resid_sq.merge(other._resid_sq)
        return self

    @property
    def beta_mean(self):
        return self._beta.total / self.n

    @property
    def sum_beta(self):
        return self._beta.total.copy()

    def scatter_about(self, mu):
        """S = sum_i (beta_i - mu)(beta_i - mu)' from the raw sums."""
        mu = np.asarray(mu, dtype=float)
        sb = self._beta.total
        return self._outer.total - np.outer(mu, sb) - np.outer(sb, mu) + self.n * np.outer(mu, mu)

    @property
    def sum_resid(self):
        return self._resid.total.copy()

    def sse_about(self, gamma):
        """sum_i ||resid_i - gamma||^2 from the raw sums."""
        gamma = np.asarray(gamma, dtype=float)
        return float(
            self._resid_sq.total
            - 2.0 * gamma @ self._resid.total
            + self.n * gamma @ gamma
        )

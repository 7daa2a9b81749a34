"""Per-user design matrices and their counterfactual twins.

Each user's regression rows cover weeks ``p+1 .. n_weeks`` (the first
``p`` weeks condition the autoregression).  Column layout, in order:

- ``lag_1 .. lag_p``: lagged weekly response
- one fractional usage column per version (chronological order)
- ``wait_0 .. wait_{max_wait-1}``: 1 when the user is on the newest
  release and that release is exactly k weeks old
- ``upgrade_week``: 1 in weeks the user moves to a scheduled release
- ``virgin``: 1 for users first seen inside the window
- ``rolling_avg``: trailing six-month mean of the user's own response

The week-effect regressor block is an identity matrix for every user
and is never materialized; fitters add the week effect directly.

The counterfactual design re-routes a treated user's candidate-version
usage onto their prior version and touches nothing else, so factual and
counterfactual rows agree outside the version block and the implied
placebo keeps the user's adoption behavior (waiting-time profile,
upgrade weeks) while removing the release's own contribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .panel import Panel, TreatmentAssignment

__all__ = [
    "ColumnSchema",
    "DesignPair",
    "build_design",
    "build_counterfactual",
    "collinearity_diagnostic",
    "slice_designs",
    "dump_design_csv",
    "waiting_age_matrix",
]


@dataclass(frozen=True)
class ColumnSchema:
    """Column layout of the user-level design matrix."""

    ar_order: int
    version_ids: tuple[str, ...]
    max_wait: int

    def __post_init__(self):
        if self.ar_order < 0:
            raise ConfigError("ar_order must be non-negative")
        if self.max_wait < 0:
            raise ConfigError("max_wait must be non-negative")

    @classmethod
    def for_window(cls, window, ar_order: int, *,
                   include_waiting: bool = True) -> "ColumnSchema":
        """``include_waiting=False`` drops the waiting-time block, giving
        the deliberately confounded variant without adoption-age controls."""
        if ar_order >= window.n_weeks:
            raise ConfigError(
                f"ar_order {ar_order} leaves no regression rows in a "
                f"{window.n_weeks}-week window"
            )
        return cls(ar_order=ar_order, version_ids=window.version_ids,
                   max_wait=window.max_wait if include_waiting else 0)

    @property
    def n_versions(self) -> int:
        return len(self.version_ids)

    @property
    def d(self) -> int:
        return self.ar_order + self.n_versions + self.max_wait + 3

    @property
    def lag_slice(self) -> slice:
        return slice(0, self.ar_order)

    @property
    def version_slice(self) -> slice:
        return slice(self.ar_order, self.ar_order + self.n_versions)

    @property
    def wait_slice(self) -> slice:
        start = self.ar_order + self.n_versions
        return slice(start, start + self.max_wait)

    @property
    def upgrade_col(self) -> int:
        return self.ar_order + self.n_versions + self.max_wait

    @property
    def virgin_col(self) -> int:
        return self.upgrade_col + 1

    @property
    def rolling_col(self) -> int:
        return self.upgrade_col + 2

    def version_col(self, version_id: str) -> int:
        try:
            return self.ar_order + self.version_ids.index(version_id)
        except ValueError:
            raise ConfigError(f"unknown version {version_id!r}") from None

    @property
    def column_names(self) -> tuple[str, ...]:
        names = [f"lag_{j}" for j in range(1, self.ar_order + 1)]
        names += [f"ver_{v}" for v in self.version_ids]
        names += [f"wait_{k}" for k in range(self.max_wait)]
        names += ["upgrade_week", "virgin", "rolling_avg"]
        return tuple(names)


@dataclass
class DesignPair:
    """One user's response vector and design matrix.

    ``f`` has shape (n_rows, d); row r corresponds to calendar week
    ``first_week + r``.  ``cf_span`` is set only on counterfactual
    designs of treated users: the inclusive calendar-week span of their
    candidate-version usage, inside which autoregressive lags must be
    replaced by sequential predictions.
    """

    user_id: str
    y: np.ndarray
    f: np.ndarray
    first_week: int
    cf_span: tuple[int, int] | None = None

    @property
    def n_rows(self) -> int:
        return self.f.shape[0]

    def row_of_week(self, week: int) -> int:
        r = week - self.first_week
        if not (0 <= r < self.n_rows):
            raise ConfigError(f"week {week} outside design rows")
        return r


def _latest_and_age(window) -> tuple[np.ndarray, np.ndarray]:
    """Per calendar week: usage-column index of the newest release and its
    age in weeks, or (-1, -1) before the first release."""
    n_weeks = window.n_weeks
    latest_col = np.full(n_weeks, -1, dtype=int)
    age = np.full(n_weeks, -1, dtype=int)
    for t in range(1, n_weeks + 1):
        latest = window.latest_release_at(t)
        if latest is None:
            continue
        vid, rel_week = latest
        gap = t - rel_week
        if gap >= window.max_wait:
            raise SchemaError(
                f"release gap {gap} weeks after {vid!r} exceeds "
                f"max_wait={window.max_wait} at week {t}"
            )
        latest_col[t - 1] = window.version_index(vid)
        age[t - 1] = gap
    return latest_col, age


def waiting_age_matrix(panel: Panel) -> np.ndarray:
    """(n_users, n_weeks) integer matrix collapsing the waiting-time flags:
    entry = weeks since the newest release when the user used it that week,
    else 0.  The per-user means feed the adoption-propensity covariates."""
    window = panel.window
    latest_col, age = _latest_and_age(window)
    usage = panel.usage_tensor()
    out = np.zeros((len(panel), window.n_weeks), dtype=int)
    for t in range(window.n_weeks):
        if latest_col[t] < 0:
            continue
        on_latest = usage[:, t, latest_col[t]] > 0
        out[on_latest, t] = age[t]
    return out


def build_design(panel: Panel, schema: ColumnSchema) -> list[DesignPair]:
    """Factual designs for every user, in panel (user_id) order."""
    window = panel.window
    if schema.version_ids != window.version_ids:
        raise ConfigError("schema version set does not match the panel window")
    p = schema.ar_order
    n_weeks = window.n_weeks
    if p >= n_weeks:
        raise ConfigError("ar_order leaves no regression rows")
    rows = n_weeks - p

    latest_col, age = _latest_and_age(window)

    usage = panel.usage_tensor()          # (n, T, R)
    response = panel.weekly_response_matrix()
    n = len(panel)
    f = np.zeros((n, rows, schema.d))

    for j in range(1, p + 1):
        f[:, :, j - 1] = response[:, p - j : n_weeks - j]
    f[:, :, schema.version_slice] = usage[:, p:, :]
    if schema.max_wait > 0:
        wait = np.zeros((n, rows, schema.max_wait))
        for t in range(p + 1, n_weeks + 1):
            if latest_col[t - 1] < 0:
                continue
            on_latest = usage[:, t - 1, latest_col[t - 1]] > 0
            wait[:, t - 1 - p, age[t - 1]] = on_latest.astype(float)
        f[:, :, schema.wait_slice] = wait
    f[:, :, schema.upgrade_col] = np.stack([u.upgrade_weeks[p:] for u in panel.users]).astype(float)
    f[:, :, schema.virgin_col] = np.array([u.virgin for u in panel.users], dtype=float)[:, None]
    f[:, :, schema.rolling_col] = np.stack([u.rolling_avg[p:] for u in panel.users])

    return [
        DesignPair(user_id=u.user_id, y=response[i, p:].copy(), f=f[i],
                   first_week=p + 1)
        for i, u in enumerate(panel.users)
    ]


def _prior_version_col(panel: Panel, schema: ColumnSchema, user_id: str,
                       cv_vidx: int) -> int:
    """Design column of the version a treated user held before adopting
    the candidate version (usage-matrix index ``cv_vidx``).

    The version with the largest usage share in the user's last
    pre-adoption active week; ties break toward the newer version.
    Users with no pre-adoption usage fall back to the version
    immediately preceding the CV in chronological order.
    """
    user = panel.user(user_id)
    first_cv_week_idx = None
    col_usage = user.usage[:, cv_vidx]
    nz = np.flatnonzero(col_usage > 0)
    if nz.size:
        first_cv_week_idx = int(nz[0])
    before = user.usage[:first_cv_week_idx].copy()
    before[:, cv_vidx] = 0.0
    active = np.flatnonzero(before.sum(axis=1) > 0)
    if active.size:
        last = before[active[-1]]
        best = np.flatnonzero(last == last.max())[-1]
        return schema.version_slice.start + int(best)
    if cv_vidx == 0:
        raise DataError(
            f"user {user_id!r}: candidate version is the oldest known "
            "version, no fallback prior version exists"
        )
    return schema.version_slice.start + cv_vidx - 1


def build_counterfactual(panel: Panel, schema: ColumnSchema,
                         designs: list[DesignPair],
                         ta: TreatmentAssignment) -> list[DesignPair]:
    """Counterfactual designs, aligned with ``designs``.

    Treated users: every row with positive CV usage (from adoption until
    their next real upgrade ends it) has that usage added to the prior
    version's column and the CV column zeroed, preserving row sums.
    Control users share the factual object unchanged.
    """
    window = panel.window
    cv_col = schema.version_col(ta.cv)
    cv_vidx = window.version_index(ta.cv)
    treated = set(ta.treated_user_ids)
    out = []
    for dp in designs:
        if dp.user_id not in treated:
            out.append(dp)
            continue
        f = dp.f.copy()
        cv_usage = f[:, cv_col].copy()
        used = np.flatnonzero(cv_usage > 0)
        if used.size == 0:
            # Treated status came from lifetime weeks, which always lie
            # inside the design rows, so this cannot happen.
            raise DataError(f"treated user {dp.user_id!r} has no CV usage rows")
        prior_col = _prior_version_col(panel, schema, dp.user_id, cv_vidx)
        f[used, prior_col] += cv_usage[used]
        f[used, cv_col] = 0.0
        span = (dp.first_week + int(used[0]), dp.first_week + int(used[-1]))
        out.append(replace(dp, f=f, cf_span=span))
    return out


def collinearity_diagnostic(designs: list[DesignPair], schema: ColumnSchema,
                            ta: TreatmentAssignment,
                            week_range: tuple[int, int]) -> float:
    """Pearson correlation between the stacked CV usage column and the
    stacked sum of the first k waiting-time columns, k = CV lifetime
    length, over all users and all design rows inside ``week_range``.

    Values near 1 mean the window cannot separate the CV effect from
    the early-adopter profile; a sequence of releases drives it down.
    """
    lo, hi = week_range
    cv_col = schema.version_col(ta.cv)
    k = min(ta.lifetime_end - ta.release_week + 1, schema.max_wait)
    wait = schema.wait_slice
    xs, ys = [], []
    for dp in designs:
        a = max(lo, dp.first_week) - dp.first_week
        b = min(hi, dp.first_week + dp.n_rows - 1) - dp.first_week
        if b < a:
            continue
        block = dp.f[a : b + 1]
        xs.append(block[:, cv_col])
        ys.append(block[:, wait.start : wait.start + k].sum(axis=1))
    if not xs:
        raise DataError(f"week_range {week_range} covers no design rows")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if x.std() == 0 or y.std() == 0:
        raise DataError("degenerate columns in week_range; correlation undefined")
    return float(np.corrcoef(x, y)[0, 1])


def slice_designs(designs: list[DesignPair], week_range: tuple[int, int]) -> list[DesignPair]:
    """Restrict designs to calendar weeks ``[lo, hi]`` (rows only;
    autoregressive lag values keep their true history)."""
    lo, hi = week_range
    out = []
    for dp in designs:
        a = max(lo, dp.first_week)
        b = min(hi, dp.first_week + dp.n_rows - 1)
        if b < a:
            raise DataError(
                f"week_range {week_range} leaves no rows for user {dp.user_id!r}"
            )
        sl = slice(a - dp.first_week, b - dp.first_week + 1)
        out.append(replace(dp, y=dp.y[sl], f=dp.f[sl], first_week=a))
    return out


def dump_design_csv(dp: DesignPair, schema: ColumnSchema, path) -> None:
    """Debug dump of one user's design with a schema header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("week", "y") + schema.column_names)
        for r in range(dp.n_rows):
            writer.writerow(
                [dp.first_week + r, repr(float(dp.y[r]))]
                + [repr(float(v)) for v in dp.f[r]]
            )

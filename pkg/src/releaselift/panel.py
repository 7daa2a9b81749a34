"""Longitudinal usage panel: ingestion, validation, persistence.

The canonical exchange format is a CSV with header
``user_id,week,version,sessions,response``; one row per user, week and
version actually used.  ``response`` is the share of the user's weekly
response attributed to that row, so the weekly response is the sum over
a user's rows for that week.  Weeks with no rows contribute zero
sessions and zero response; once a user appears anywhere they are
carried for all ``n_weeks`` weeks of the window.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SchemaError

logger = logging.getLogger(__name__)

CSV_HEADER = ("user_id", "week", "version", "sessions", "response")

# Trailing horizon of the per-user rolling response covariate (six months).
ROLLING_LOOKBACK_WEEKS = 26


@dataclass(frozen=True)
class StudyWindow:
    """Study window geometry: week grid, release schedule, version set.

    ``release_schedule`` lists the versions released inside the window
    as ``(version_id, release_week)`` in release order.  ``version_ids``
    is the full column order for usage matrices and must contain every
    scheduled version plus any legacy (pre-window) versions.
    """

    n_weeks: int
    release_schedule: tuple[tuple[str, int], ...]
    version_ids: tuple[str, ...]
    max_wait: int = 14

    def __post_init__(self):
        object.__setattr__(self, "release_schedule", tuple((str(v), int(w)) for v, w in self.release_schedule))
        object.__setattr__(self, "version_ids", tuple(str(v) for v in self.version_ids))
        if self.n_weeks < 1:
            raise ConfigError("n_weeks must be positive")
        if len(set(self.version_ids)) != len(self.version_ids):
            raise ConfigError("version_ids must be unique")
        weeks = [w for _, w in self.release_schedule]
        if any(w < 1 or w > self.n_weeks for w in weeks):
            raise ConfigError("release weeks must fall inside the window")
        if any(b <= a for a, b in zip(weeks, weeks[1:])):
            raise ConfigError("release schedule must be strictly increasing in week")
        gaps = [b - a for a, b in zip(weeks, weeks[1:])]
        if any(g > self.max_wait for g in gaps):
            raise ConfigError(
                f"release gaps {gaps} exceed max_wait={self.max_wait}; "
                "waiting-time indicators would overflow"
            )
        known = set(self.version_ids)
        missing = [v for v, _ in self.release_schedule if v not in known]
        if missing:
            raise ConfigError(f"scheduled versions {missing} missing from version_ids")

    @property
    def n_versions(self) -> int:
        return len(self.version_ids)

    def version_index(self, version_id: str) -> int:
        try:
            return self.version_ids.index(version_id)
        except ValueError:
            raise ConfigError(f"unknown version {version_id!r}") from None

    def release_week_of(self, version_id: str) -> int:
        for v, w in self.release_schedule:
            if v == version_id:
                return w
        raise ConfigError(f"version {version_id!r} is not in the release schedule")

    def latest_release_at(self, week: int):
        """(version_id, release_week) of the newest release out by ``week``,
        or None if nothing has shipped yet."""
        latest = None
        for v, w in self.release_schedule:
            if w <= week:
                latest = (v, w)
        return latest

    def lifetime(self, version_id: str) -> tuple[int, int]:
        """Inclusive week span during which ``version_id`` is the newest
        release: from its release to the week before the next one."""
        scheduled = [v for v, _ in self.release_schedule]
        if version_id not in scheduled:
            raise ConfigError(f"version {version_id!r} is not in the release schedule")
        weeks = [w for _, w in self.release_schedule]
        idx = scheduled.index(version_id)
        start = weeks[idx]
        end = weeks[idx + 1] - 1 if idx + 1 < len(weeks) else self.n_weeks
        return start, min(end, self.n_weeks)

    def to_json_dict(self) -> dict:
        return {
            "n_weeks": self.n_weeks,
            "release_schedule": [[v, w] for v, w in self.release_schedule],
            "version_ids": list(self.version_ids),
            "max_wait": self.max_wait,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "StudyWindow":
        try:
            return cls(
                n_weeks=int(raw["n_weeks"]),
                release_schedule=tuple((v, int(w)) for v, w in raw["release_schedule"]),
                version_ids=tuple(raw["version_ids"]),
                max_wait=int(raw.get("max_wait", 14)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed study window description: {exc}") from exc


@dataclass
class UserRecord:
    """One user's trajectory on the week grid.

    ``usage`` is (n_weeks, n_versions) with fractional rows: the share
    of the week's sessions spent on each version.  Rows sum to 1 on
    active weeks and 0 on inactive ones.
    """

    user_id: str
    usage: np.ndarray
    response: np.ndarray
    sessions: np.ndarray
    virgin: bool
    first_active_week: int
    upgrade_weeks: np.ndarray
    rolling_avg: np.ndarray

    def active_weeks(self) -> np.ndarray:
        return np.flatnonzero(self.sessions > 0) + 1


@dataclass
class Panel:
    window: StudyWindow
    users: list[UserRecord]

    def __post_init__(self):
        self.users = sorted(self.users, key=lambda u: u.user_id)
        ids = [u.user_id for u in self.users]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate user_id in panel")
        self._index = {uid: i for i, uid in enumerate(ids)}

    def __len__(self):
        return len(self.users)

    @property
    def user_ids(self) -> list[str]:
        return [u.user_id for u in self.users]

    def user(self, user_id: str) -> UserRecord:
        return self.users[self._index[user_id]]

    def weekly_response_matrix(self) -> np.ndarray:
        return np.stack([u.response for u in self.users])

    def usage_tensor(self) -> np.ndarray:
        return np.stack([u.usage for u in self.users])


@dataclass(frozen=True)
class TreatmentAssignment:
    """Treated/control split for one candidate version (CV).

    Treated users have positive CV usage during the CV lifetime.  Users
    in ``fallback_user_ids`` are treated but show no earlier version
    before first touching the CV; counterfactual construction falls
    back to the most recent release preceding the CV for them.
    """

    cv: str
    release_week: int
    lifetime_end: int
    treated_user_ids: tuple[str, ...]
    control_user_ids: tuple[str, ...]
    fallback_user_ids: tuple[str, ...] = ()

    @property
    def lifetime_weeks(self) -> tuple[int, ...]:
        return tuple(range(self.release_week, self.lifetime_end + 1))

    @property
    def n_treated(self) -> int:
        return len(self.treated_user_ids)


def rolling_average(response: np.ndarray, lookback: int = ROLLING_LOOKBACK_WEEKS) -> np.ndarray:
    """Strictly trailing rolling mean of a weekly response series.

    Week t averages weeks [t - lookback, t - 1] clipped to the window,
    counting every calendar week whether or not the user was active;
    the first week has no history and gets 0.  Using only prior weeks
    keeps the covariate a fixed regressor under the conditional
    likelihood.
    """
    response = np.asarray(response, dtype=float)
    out = np.zeros_like(response)
    csum = np.concatenate([[0.0], np.cumsum(response)])
    for t in range(1, len(response)):
        lo = max(0, t - lookback)
        out[t] = (csum[t] - csum[lo]) / (t - lo)
    return out


def _detect_upgrade_weeks(window: StudyWindow, usage: np.ndarray,
                          first_active_week: int, virgin: bool) -> np.ndarray:
    """Upgrade-week indicators from the usage history.

    A user upgrades in the first week they show positive usage of a
    scheduled release, except that starting the panel on a version does
    not count unless the user is virgin and entered directly on the
    then-newest release (the first-week-adopter case).
    """
    upgrades = np.zeros(window.n_weeks, dtype=bool)
    for v, release_week in window.release_schedule:
        col = window.version_index(v)
        active = np.flatnonzero(usage[:, col] > 0)
        if active.size == 0:
            continue
        first_use = int(active[0]) + 1
        if first_use > first_active_week:
            upgrades[first_use - 1] = True
        elif virgin:
            latest = window.latest_release_at(first_use)
            if latest is not None and latest[0] == v:
                upgrades[first_use - 1] = True
    return upgrades


def build_user_record(window: StudyWindow, user_id: str, sessions_by_version: np.ndarray,
                      response: np.ndarray, known_before_window: bool = False) -> UserRecord:
    """Assemble a UserRecord from raw weekly counts.

    ``sessions_by_version``: (n_weeks, n_versions) integer session
    counts.  ``response``: (n_weeks,) weekly response totals.
    """
    sessions_by_version = np.asarray(sessions_by_version, dtype=float)
    response = np.asarray(response, dtype=float)
    weekly_sessions = sessions_by_version.sum(axis=1)
    if np.any(response < 0):
        raise SchemaError(f"user {user_id!r}: negative response")
    usage = np.zeros_like(sessions_by_version)
    active = weekly_sessions > 0
    usage[active] = sessions_by_version[active] / weekly_sessions[active, None]
    if not active.any():
        raise DataError(f"user {user_id!r} has no active weeks")
    first_active_week = int(np.flatnonzero(active)[0]) + 1
    virgin = (first_active_week > 1) and not known_before_window
    return UserRecord(
        user_id=user_id,
        usage=usage,
        response=response,
        sessions=weekly_sessions,
        virgin=virgin,
        first_active_week=first_active_week,
        upgrade_weeks=_detect_upgrade_weeks(window, usage, first_active_week, virgin),
        rolling_avg=rolling_average(response),
    )


def ingest_csv(path, window: StudyWindow, lookback_user_ids=None) -> Panel:
    """Read a canonical CSV into a validated Panel.

    ``lookback_user_ids`` optionally lists users known to have been
    active before the window; they are never classified virgin.
    """
    lookback = set(lookback_user_ids) if lookback_user_ids else set()
    release_week = {v: w for v, w in window.release_schedule}
    vindex = {v: i for i, v in enumerate(window.version_ids)}

    # keyed (user_id) -> [sessions (T,R), response_rows (T,R)]
    sessions_acc: dict[str, np.ndarray] = {}
    response_acc: dict[str, np.ndarray] = {}
    seen_rows: set[tuple[str, int, str]] = set()
    duplicates = 0

    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise SchemaError("empty CSV: missing header") from None
        if header != CSV_HEADER:
            raise SchemaError(f"bad header {header!r}; expected {CSV_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise SchemaError(f"line {lineno}: expected 5 fields, got {len(row)}")
            uid, week_s, version, sessions_s, response_s = row
            try:
                week = int(week_s)
                sessions = int(sessions_s)
                response = float(response_s)
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
            if not (1 <= week <= window.n_weeks):
                raise SchemaError(f"line {lineno}: week {week} outside [1, {window.n_weeks}]")
            if version not in vindex:
                raise SchemaError(f"line {lineno}: unknown version {version!r}")
            if sessions < 0:
                raise SchemaError(f"line {lineno}: negative sessions")
            if response < 0:
                raise SchemaError(f"line {lineno}: negative response")
            if not np.isfinite(response):
                raise SchemaError(f"line {lineno}: non-finite response")
            if version in release_week and week < release_week[version]:
                raise SchemaError(
                    f"line {lineno}: usage of {version!r} at week {week} "
                    f"predates its release week {release_week[version]}"
                )
            key = (uid, week, version)
            if key in seen_rows:
                duplicates += 1
            seen_rows.add(key)
            if uid not in sessions_acc:
                sessions_acc[uid] = np.zeros((window.n_weeks, window.n_versions))
                response_acc[uid] = np.zeros(window.n_weeks)
            sessions_acc[uid][week - 1, vindex[version]] += sessions
            response_acc[uid][week - 1] += response

    if duplicates:
        logger.warning("merged %d duplicate (user, week, version) rows by summation", duplicates)
    if not sessions_acc:
        raise DataError("CSV contains no data rows")

    users = []
    excluded = 0
    for uid in sorted(sessions_acc):
        if sessions_acc[uid].sum() <= 0:
            excluded += 1
            continue
        users.append(build_user_record(window, uid, sessions_acc[uid], response_acc[uid],
                                       known_before_window=uid in lookback))
    if excluded:
        logger.warning("excluded %d users with zero sessions across the window", excluded)
    if not users:
        raise DataError("CSV contains no users with any sessions")
    return Panel(window=window, users=users)


def export_csv(panel: Panel, path) -> None:
    """Write the canonical CSV.

    Deterministic row order: (user_id, week, version column order).
    The weekly response rides on the first used version's row; response
    is a weekly aggregate, so any within-week attribution sums back to
    the same panel, and this one round-trips in exact floats.  A week
    with response but no sessions is carried by a zero-session row on
    the legacy version (response is measured independently of version
    telemetry, so such weeks are representable data).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for user in panel.users:
            for t in range(panel.window.n_weeks):
                total = user.sessions[t]
                if total <= 0:
                    if user.response[t] > 0:
                        writer.writerow([
                            user.user_id, t + 1, panel.window.version_ids[0],
                            0, np.format_float_positional(user.response[t], trim="0"),
                        ])
                    continue
                cols = np.flatnonzero(user.usage[t] > 0)
                # Session fractions were built as count/total, so this
                # re-quantization is exact.
                sess_parts = np.rint(user.usage[t, cols] * total).astype(int)
                drift = int(total) - int(sess_parts.sum())
                sess_parts[-1] += drift
                for j, (c, s) in enumerate(zip(cols, sess_parts)):
                    resp = user.response[t] if j == 0 else 0.0
                    writer.writerow([
                        user.user_id, t + 1, panel.window.version_ids[c],
                        int(s), np.format_float_positional(resp, trim="0"),
                    ])


def assign_treatment(panel: Panel, cv: str) -> TreatmentAssignment:
    """Split the panel into treated and control for candidate version ``cv``.

    Treated: positive CV usage during the CV lifetime (release week
    through the week before the next release, or the end of the
    window).  Everyone else is control, including users who only adopt
    the CV after its lifetime ends.
    """
    window = panel.window
    release_week = window.release_week_of(cv)
    start, end = window.lifetime(cv)
    if start == window.n_weeks:
        logger.warning("CV %s released in the final week; lifetime is a single week", cv)
    col = window.version_index(cv)
    treated, control, fallback = [], [], []
    for user in panel.users:
        life_usage = user.usage[start - 1 : end, col]
        if np.any(life_usage > 0):
            treated.append(user.user_id)
            first_cv = int(np.flatnonzero(user.usage[:, col] > 0)[0])
            before = user.usage[:first_cv]
            had_prior = np.any(np.delete(before, col, axis=1) > 0)
            if not had_prior:
                fallback.append(user.user_id)
        else:
            control.append(user.user_id)
    if not treated:
        raise DataError(f"no users adopted {cv!r} during its lifetime")
    return TreatmentAssignment(
        cv=cv,
        release_week=release_week,
        lifetime_end=end,
        treated_user_ids=tuple(treated),
        control_user_ids=tuple(control),
        fallback_user_ids=tuple(fallback),
    )


# ---------------------------------------------------------------------------
# Binary persistence: columnar shards + JSON manifest.

_SHARDS = ("user_ids", "usage", "response", "sessions", "virgin",
           "first_active_week", "upgrade_weeks", "rolling_avg")


def _panel_arrays(panel: Panel) -> dict[str, np.ndarray]:
    return {
        "user_ids": np.array(panel.user_ids, dtype=str),
        "usage": panel.usage_tensor(),
        "response": panel.weekly_response_matrix(),
        "sessions": np.stack([u.sessions for u in panel.users]),
        "virgin": np.array([u.virgin for u in panel.users], dtype=bool),
        "first_active_week": np.array([u.first_active_week for u in panel.users], dtype=np.int64),
        "upgrade_weeks": np.stack([u.upgrade_weeks for u in panel.users]),
        "rolling_avg": np.stack([u.rolling_avg for u in panel.users]),
    }


def _checksum(arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in _SHARDS:
        arr = np.ascontiguousarray(arrays[name])
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def save_panel(panel: Panel, directory) -> Path:
    """Persist the panel as one .npy shard per column plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _panel_arrays(panel)
    for name in _SHARDS:
        np.save(directory / f"{name}.npy", arrays[name], allow_pickle=False)
    manifest = {
        "format": "releaselift-panel/1",
        "n_weeks": panel.window.n_weeks,
        "n_versions": panel.window.n_versions,
        "n_users": len(panel),
        "release_schedule": [list(item) for item in panel.window.release_schedule],
        "version_ids": list(panel.window.version_ids),
        "max_wait": panel.window.max_wait,
        "shards": [f"{name}.npy" for name in _SHARDS],
        "checksum": _checksum(arrays),
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_panel(directory) -> Panel:
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{directory} has no manifest.json") from None
    if manifest.get("format") != "releaselift-panel/1":
        raise SchemaError(f"unrecognized panel format {manifest.get('format')!r}")
    arrays = {}
    for name in _SHARDS:
        try:
            arrays[name] = np.load(directory / f"{name}.npy", allow_pickle=False)
        except FileNotFoundError:
            raise DataError(f"missing shard {name}.npy") from None
    if _checksum(arrays) != manifest["checksum"]:
        raise DataError("panel checksum mismatch; shards corrupted or edited")
    window = StudyWindow(
        n_weeks=manifest["n_weeks"],
        release_schedule=tuple((v, w) for v, w in manifest["release_schedule"]),
        version_ids=tuple(manifest["version_ids"]),
        max_wait=manifest["max_wait"],
    )
    users = []
    for i, uid in enumerate(arrays["user_ids"]):
        users.append(UserRecord(
            user_id=str(uid),
            usage=arrays["usage"][i],
            response=arrays["response"][i],
            sessions=arrays["sessions"][i],
            virgin=bool(arrays["virgin"][i]),
            first_active_week=int(arrays["first_active_week"][i]),
            upgrade_weeks=arrays["upgrade_weeks"][i],
            rolling_avg=arrays["rolling_avg"][i],
        ))
    return Panel(window=window, users=users)


def content_hash(path) -> str:
    """Git-style blob hash of a file (sha1 over a blob header + bytes)."""
    data = Path(path).read_bytes()
    digest = hashlib.sha1()
    digest.update(f"blob {len(data)}\0".encode())
    digest.update(data)
    return digest.hexdigest()

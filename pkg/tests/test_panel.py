"""Panel layer: window geometry, record assembly, CSV and binary round-trips."""

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from releaselift.errors import ConfigError, DataError, SchemaError
from releaselift.panel import (
    CSV_HEADER,
    Panel,
    StudyWindow,
    TreatmentAssignment,
    assign_treatment,
    build_user_record,
    content_hash,
    export_csv,
    ingest_csv,
    load_panel,
    rolling_average,
    save_panel,
)


# ---------------------------------------------------------------------------
# StudyWindow


def test_window_basic_geometry(tiny_window):
    assert tiny_window.n_versions == 4
    assert tiny_window.version_index("r2") == 2
    assert tiny_window.release_week_of("r1") == 2
    assert tiny_window.latest_release_at(1) is None
    assert tiny_window.latest_release_at(2) == ("r1", 2)
    assert tiny_window.latest_release_at(9) == ("r2", 6)
    assert tiny_window.lifetime("r1") == (2, 5)
    assert tiny_window.lifetime("r3") == (10, 12)  # last release runs to window end


def test_window_unknown_version_raises(tiny_window):
    with pytest.raises(ConfigError, match="unknown version"):
        tiny_window.version_index("r9")
    with pytest.raises(ConfigError, match="not in the release schedule"):
        tiny_window.release_week_of("r0")  # legacy version: present but never scheduled
    with pytest.raises(ConfigError, match="not in the release schedule"):
        tiny_window.lifetime("r0")


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        (dict(n_weeks=0, release_schedule=(), version_ids=("a",)), "n_weeks"),
        (dict(n_weeks=5, release_schedule=(), version_ids=("a", "a")), "unique"),
        (dict(n_weeks=5, release_schedule=(("a", 9),), version_ids=("a",)), "inside the window"),
        (
            dict(n_weeks=5, release_schedule=(("a", 3), ("b", 3)), version_ids=("a", "b")),
            "strictly increasing",
        ),
        (
            dict(n_weeks=30, release_schedule=(("a", 2), ("b", 25)), version_ids=("a", "b"), max_wait=6),
            "exceed max_wait",
        ),
        (dict(n_weeks=5, release_schedule=(("a", 2),), version_ids=("b",)), "missing from version_ids"),
    ],
)
def test_window_validation(kwargs, msg):
    with pytest.raises(ConfigError, match=msg):
        StudyWindow(**kwargs)


def test_window_json_round_trip(tiny_window):
    raw = json.loads(json.dumps(tiny_window.to_json_dict()))
    assert StudyWindow.from_json_dict(raw) == tiny_window
    with pytest.raises(ConfigError, match="malformed"):
        StudyWindow.from_json_dict({"n_weeks": 4})


# ---------------------------------------------------------------------------
# Rolling average


def test_rolling_average_counts_calendar_weeks():
    # lookback 3; inactive (zero) weeks still count toward the denominator
    out = rolling_average(np.array([10.0, 0.0, 30.0, 40.0]), lookback=3)
    assert out[0] == 0.0
    assert out[1] == pytest.approx(10.0)
    assert out[2] == pytest.approx(5.0)
    assert out[3] == pytest.approx(40.0 / 3)


def test_rolling_average_is_strictly_trailing():
    y = np.arange(1.0, 9.0)
    out = rolling_average(y, lookback=26)
    # bumping week t cannot change the covariate at or before week t
    y2 = y.copy()
    y2[4] += 100.0
    out2 = rolling_average(y2, lookback=26)
    assert np.array_equal(out[: 5], out2[: 5])
    assert np.all(out2[5:] > out[5:])


@given(
    st.lists(st.floats(min_value=0, max_value=1e4), min_size=1, max_size=40),
    st.integers(min_value=1, max_value=30),
)
@settings(max_examples=60, deadline=None)
def test_rolling_average_matches_naive_loop(values, lookback):
    y = np.array(values)
    out = rolling_average(y, lookback=lookback)
    for t in range(len(y)):
        lo = max(0, t - lookback)
        expect = y[lo:t].sum() / (t - lo) if t > 0 else 0.0
        assert out[t] == pytest.approx(expect, abs=1e-9)


# ---------------------------------------------------------------------------
# UserRecord assembly


def _sessions(window: StudyWindow, rows) -> np.ndarray:
    """rows: {week: {version: count}} -> (T, R) counts."""
    out = np.zeros((window.n_weeks, window.n_versions))
    for week, byv in rows.items():
        for v, c in byv.items():
            out[week - 1, window.version_index(v)] = c
    return out


def test_usage_fractions_exact(tiny_window):
    sess = _sessions(tiny_window, {3: {"r0": 4, "r1": 3}})
    rec = build_user_record(tiny_window, "u1", sess, np.zeros(12))
    assert rec.usage[2, 0] == pytest.approx(4 / 7)
    assert rec.usage[2, 1] == pytest.approx(3 / 7)
    assert rec.usage[2].sum() == pytest.approx(1.0)
    assert np.all(rec.usage[[0, 1] + list(range(3, 12))] == 0)
    assert rec.sessions[2] == 7
    assert list(rec.active_weeks()) == [3]


def test_virgin_flag_and_lookback(tiny_window):
    sess = _sessions(tiny_window, {4: {"r1": 2}})
    assert build_user_record(tiny_window, "u", sess, np.zeros(12)).virgin
    assert not build_user_record(
        tiny_window, "u", sess, np.zeros(12), known_before_window=True
    ).virgin
    sess1 = _sessions(tiny_window, {1: {"r0": 2}})
    assert not build_user_record(tiny_window, "u", sess1, np.zeros(12)).virgin


def test_upgrade_week_detection(tiny_window):
    # active on r0 from week 1, picks up r1 at week 3, r2 at week 8
    sess = _sessions(
        tiny_window,
        {1: {"r0": 2}, 2: {"r0": 1}, 3: {"r1": 3}, 8: {"r1": 1, "r2": 1}},
    )
    rec = build_user_record(tiny_window, "u", sess, np.zeros(12))
    assert list(np.flatnonzero(rec.upgrade_weeks) + 1) == [3, 8]


def test_starting_on_a_release_is_not_an_upgrade(tiny_window):
    # non-virgin user first seen at week 1 already on r1-equivalent? r1 ships
    # week 2, so start them at week 3 on r1: known before the window, so the
    # panel start does not count as an adoption event.
    sess = _sessions(tiny_window, {3: {"r1": 2}, 4: {"r1": 2}})
    rec = build_user_record(tiny_window, "u", sess, np.zeros(12), known_before_window=True)
    assert not rec.upgrade_weeks.any()


def test_virgin_entering_on_newest_release_counts_as_upgrade(tiny_window):
    sess = _sessions(tiny_window, {7: {"r2": 5}})
    rec = build_user_record(tiny_window, "u", sess, np.zeros(12))
    assert rec.virgin
    assert list(np.flatnonzero(rec.upgrade_weeks) + 1) == [7]
    # virgin entering on an OLD version is not an adoption event
    sess_old = _sessions(tiny_window, {7: {"r0": 5}})
    rec_old = build_user_record(tiny_window, "u", sess_old, np.zeros(12))
    assert not rec_old.upgrade_weeks.any()


def test_record_validation(tiny_window):
    ok = _sessions(tiny_window, {1: {"r0": 1}})
    bad_resp = np.zeros(12)
    bad_resp[3] = -1.0
    with pytest.raises(SchemaError, match="negative response"):
        build_user_record(tiny_window, "u", ok, bad_resp)
    with pytest.raises(DataError, match="no active weeks"):
        build_user_record(tiny_window, "u", np.zeros((12, 4)), np.zeros(12))


def test_panel_rejects_duplicate_ids(tiny_window):
    sess = _sessions(tiny_window, {1: {"r0": 1}})
    rec = build_user_record(tiny_window, "dup", sess, np.zeros(12))
    with pytest.raises(DataError, match="duplicate"):
        Panel(window=tiny_window, users=[rec, rec])


def test_panel_sorts_users(tiny_window):
    sess = _sessions(tiny_window, {1: {"r0": 1}})
    users = [build_user_record(tiny_window, uid, sess, np.zeros(12)) for uid in ("b", "a", "c")]
    panel = Panel(window=tiny_window, users=users)
    assert panel.user_ids == ["a", "b", "c"]
    assert panel.user("b") is users[0]


# ---------------------------------------------------------------------------
# CSV round-trip


def _mixed_panel(window: StudyWindow) -> Panel:
    resp_a = np.zeros(12)
    resp_a[:5] = [10.0, 12.5, 123.456789012345678, 9.0, 0.125]
    resp_a[5] = 7.75  # inactive week with response: zero-session carrier row
    a = build_user_record(
        window,
        "alice",
        _sessions(window, {1: {"r0": 3}, 2: {"r0": 4, "r1": 3}, 3: {"r1": 7}, 4: {"r1": 2}, 5: {"r1": 1}}),
        resp_a,
        known_before_window=True,
    )
    resp_b = np.zeros(12)
    resp_b[6:9] = [1.0, 2.0, 3.0]
    b = build_user_record(window, "bob", _sessions(window, {7: {"r2": 5}, 8: {"r2": 4}, 9: {"r2": 6}}), resp_b)
    return Panel(window=window, users=[a, b])


def test_csv_round_trip_is_byte_exact(tiny_window, tmp_path):
    panel = _mixed_panel(tiny_window)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export_csv(panel, p1)
    again = ingest_csv(p1, tiny_window, lookback_user_ids=["alice"])
    export_csv(again, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for uid in panel.user_ids:
        u, v = panel.user(uid), again.user(uid)
        assert np.array_equal(u.response, v.response)
        assert np.array_equal(u.sessions, v.sessions)
        assert np.array_equal(u.usage, v.usage)
        assert np.array_equal(u.rolling_avg, v.rolling_avg)
        assert u.virgin == v.virgin and u.first_active_week == v.first_active_week


def test_export_splits_sessions_exactly(tiny_window, tmp_path):
    panel = _mixed_panel(tiny_window)
    path = tmp_path / "p.csv"
    export_csv(panel, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    week2 = [ln for ln in lines if ln.startswith("alice,2,")]
    assert week2 == ["alice,2,r0,4,12.5", "alice,2,r1,3,0.0"]
    carrier = [ln for ln in lines if ln.startswith("alice,6,")]
    assert carrier == ["alice,6,r0,0,7.75"]


def test_ingest_merges_duplicate_rows(tiny_window, tmp_path, caplog):
    path = tmp_path / "dup.csv"
    path.write_text(
        "user_id,week,version,sessions,response\n"
        "u,1,r0,2,5.0\n"
        "u,1,r0,3,1.5\n"
    )
    with caplog.at_level(logging.WARNING, logger="releaselift.panel"):
        panel = ingest_csv(path, tiny_window)
    assert "merged 1 duplicate" in caplog.text
    assert panel.user("u").sessions[0] == 5
    assert panel.user("u").response[0] == pytest.approx(6.5)


def test_ingest_excludes_zero_session_users(tiny_window, tmp_path, caplog):
    path = tmp_path / "z.csv"
    path.write_text(
        "user_id,week,version,sessions,response\n"
        "ghost,1,r0,0,0.\n"
        "live,1,r0,2,4.\n"
    )
    with caplog.at_level(logging.WARNING, logger="releaselift.panel"):
        panel = ingest_csv(path, tiny_window)
    assert "excluded 1 users" in caplog.text
    assert panel.user_ids == ["live"]


@pytest.mark.parametrize(
    "rows, err, msg",
    [
        ("u,0,r0,1,1.\n", SchemaError, "week 0 outside"),
        ("u,13,r0,1,1.\n", SchemaError, "week 13 outside"),
        ("u,1,r9,1,1.\n", SchemaError, "unknown version"),
        ("u,1,r0,-1,1.\n", SchemaError, "negative sessions"),
        ("u,1,r0,1,-2.\n", SchemaError, "negative response"),
        ("u,1,r0,1,nan\n", SchemaError, "non-finite"),
        ("u,1,r1,1,1.\n", SchemaError, "predates its release"),
        ("u,1,r0,1\n", SchemaError, "expected 5 fields"),
        ("u,1.5,r0,1,1.\n", SchemaError, "invalid literal"),
        ("", DataError, "no data rows"),
    ],
)
def test_ingest_validation(tiny_window, tmp_path, rows, err, msg):
    path = tmp_path / "bad.csv"
    path.write_text("user_id,week,version,sessions,response\n" + rows)
    with pytest.raises(err, match=msg):
        ingest_csv(path, tiny_window)


def test_ingest_rejects_bad_header(tiny_window, tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("user,week,version,sessions,response\nu,1,r0,1,1.\n")
    with pytest.raises(SchemaError, match="bad header"):
        ingest_csv(path, tiny_window)
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(SchemaError, match="missing header"):
        ingest_csv(empty, tiny_window)


# ---------------------------------------------------------------------------
# Treatment assignment


def _treatment_panel(window: StudyWindow) -> Panel:
    users = [
        # prior r1 user who adopts r2 in its lifetime -> treated, not fallback
        build_user_record(
            window, "adopter",
            _sessions(window, {2: {"r1": 3}, 4: {"r1": 2}, 6: {"r2": 2}, 8: {"r2": 1}}),
            np.zeros(12),
        ),
        # never touches r2 -> control
        build_user_record(
            window, "holdout", _sessions(window, {1: {"r0": 2}, 7: {"r0": 1}}), np.zeros(12)
        ),
        # virgin entering directly on r2 -> treated, fallback
        build_user_record(window, "newcomer", _sessions(window, {7: {"r2": 5}}), np.zeros(12)),
        # first touches r2 after its lifetime ended (week 11 > 9) -> control
        build_user_record(
            window, "late", _sessions(window, {3: {"r1": 1}, 11: {"r2": 4}}), np.zeros(12)
        ),
    ]
    return Panel(window=window, users=users)


def test_assign_treatment_split(tiny_window):
    ta = assign_treatment(_treatment_panel(tiny_window), "r2")
    assert ta.cv == "r2"
    assert ta.release_week == 6
    assert ta.lifetime_end == 9
    assert ta.lifetime_weeks == (6, 7, 8, 9)
    assert set(ta.treated_user_ids) == {"adopter", "newcomer"}
    assert set(ta.control_user_ids) == {"holdout", "late"}
    assert ta.fallback_user_ids == ("newcomer",)
    assert ta.n_treated == 2


def test_assign_treatment_requires_adopters(tiny_window):
    panel = Panel(
        window=tiny_window,
        users=[
            build_user_record(tiny_window, "u", _sessions(tiny_window, {1: {"r0": 1}}), np.zeros(12))
        ],
    )
    with pytest.raises(DataError, match="no users adopted"):
        assign_treatment(panel, "r2")


# ---------------------------------------------------------------------------
# Binary persistence


def test_save_load_round_trip(tiny_window, tmp_path):
    panel = _mixed_panel(tiny_window)
    save_panel(panel, tmp_path / "p")
    again = load_panel(tmp_path / "p")
    assert again.window == panel.window
    assert again.user_ids == panel.user_ids
    for uid in panel.user_ids:
        u, v = panel.user(uid), again.user(uid)
        assert np.array_equal(u.usage, v.usage)
        assert np.array_equal(u.response, v.response)
        assert np.array_equal(u.rolling_avg, v.rolling_avg)
        assert np.array_equal(u.upgrade_weeks, v.upgrade_weeks)
        assert u.virgin == v.virgin


def test_load_detects_corruption(tiny_window, tmp_path):
    panel = _mixed_panel(tiny_window)
    directory = save_panel(panel, tmp_path / "p")
    resp = np.load(directory / "response.npy")
    resp[0, 0] += 1.0
    np.save(directory / "response.npy", resp)
    with pytest.raises(DataError, match="checksum mismatch"):
        load_panel(directory)


def test_load_missing_pieces(tiny_window, tmp_path):
    with pytest.raises(DataError, match="no manifest"):
        load_panel(tmp_path)
    directory = save_panel(_mixed_panel(tiny_window), tmp_path / "p")
    (directory / "usage.npy").unlink()
    with pytest.raises(DataError, match="missing shard"):
        load_panel(directory)


def test_load_rejects_unknown_format(tiny_window, tmp_path):
    directory = save_panel(_mixed_panel(tiny_window), tmp_path / "p")
    manifest = json.loads((directory / "manifest.json").read_text())
    manifest["format"] = "releaselift-panel/999"
    (directory / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SchemaError, match="unrecognized panel format"):
        load_panel(directory)


def test_content_hash_matches_git_blob(tmp_path):
    path = tmp_path / "f.txt"
    path.write_bytes(b"hello\n")
    assert content_hash(path) == "ce013625030ba8dba906f756967f9e9ca394464a"

"""Design layer: column layout, waiting flags, counterfactual construction."""

import numpy as np
import pytest

from releaselift.design import (
    ColumnSchema,
    build_counterfactual,
    build_design,
    collinearity_diagnostic,
    dump_design_csv,
    slice_designs,
    waiting_age_matrix,
)
from releaselift.errors import ConfigError, DataError, SchemaError
from releaselift.panel import Panel, StudyWindow, assign_treatment, build_user_record


def _sessions(window: StudyWindow, rows) -> np.ndarray:
    out = np.zeros((window.n_weeks, window.n_versions))
    for week, byv in rows.items():
        for v, c in byv.items():
            out[week - 1, window.version_index(v)] = c
    return out


def _user(window, uid, rows, response=None, known=False):
    resp = np.zeros(window.n_weeks) if response is None else np.asarray(response, dtype=float)
    return build_user_record(window, uid, _sessions(window, rows), resp, known_before_window=known)


# ---------------------------------------------------------------------------
# Schema layout


def test_schema_layout(tiny_window):
    schema = ColumnSchema.for_window(tiny_window, 2)
    assert schema.d == 2 + 4 + 6 + 3
    assert schema.lag_slice == slice(0, 2)
    assert schema.version_slice == slice(2, 6)
    assert schema.wait_slice == slice(6, 12)
    assert (schema.upgrade_col, schema.virgin_col, schema.rolling_col) == (12, 13, 14)
    assert schema.version_col("r2") == 4
    names = schema.column_names
    assert names[:3] == ("lag_1", "lag_2", "ver_r0")
    assert names[-3:] == ("upgrade_week", "virgin", "rolling_avg")
    assert len(names) == schema.d


def test_schema_without_waiting_block(tiny_window):
    schema = ColumnSchema.for_window(tiny_window, 2, include_waiting=False)
    assert schema.max_wait == 0
    assert schema.d == 2 + 4 + 3
    assert schema.wait_slice == slice(6, 6)


def test_schema_validation(tiny_window):
    with pytest.raises(ConfigError, match="ar_order"):
        ColumnSchema(ar_order=-1, version_ids=("a",), max_wait=0)
    with pytest.raises(ConfigError, match="max_wait"):
        ColumnSchema(ar_order=0, version_ids=("a",), max_wait=-2)
    with pytest.raises(ConfigError, match="no regression rows"):
        ColumnSchema.for_window(tiny_window, 12)
    with pytest.raises(ConfigError, match="unknown version"):
        ColumnSchema.for_window(tiny_window, 1).version_col("zz")


# ---------------------------------------------------------------------------
# Factual design


def test_lag_columns_are_shifted_response(tiny_window):
    resp = np.arange(1.0, 13.0) ** 2
    panel = Panel(window=tiny_window, users=[_user(tiny_window, "u", {1: {"r0": 1}}, resp, known=True)])
    schema = ColumnSchema.for_window(tiny_window, 2)
    (dp,) = build_design(panel, schema)
    assert dp.first_week == 3
    assert dp.n_rows == 10
    for r in range(dp.n_rows):
        week = dp.first_week + r
        assert dp.y[r] == resp[week - 1]
        assert dp.f[r, 0] == resp[week - 2]  # lag_1
        assert dp.f[r, 1] == resp[week - 3]  # lag_2
    assert dp.row_of_week(5) == 2
    with pytest.raises(ConfigError, match="outside design rows"):
        dp.row_of_week(2)


def test_waiting_flags_track_release_age(tiny_window):
    # on r1 from its release; upgrades to r2 two weeks late; never takes r3
    rows = {2: {"r1": 1}, 3: {"r1": 1}, 4: {"r1": 1}, 5: {"r1": 1},
            6: {"r1": 1}, 7: {"r1": 1}, 8: {"r2": 1}, 9: {"r2": 1},
            10: {"r2": 1}, 11: {"r2": 1}}
    panel = Panel(window=tiny_window, users=[_user(tiny_window, "u", rows, known=True)])
    schema = ColumnSchema.for_window(tiny_window, 1)
    (dp,) = build_design(panel, schema)
    wait = dp.f[:, schema.wait_slice]

    def flags(week):
        return list(np.flatnonzero(wait[dp.row_of_week(week)]))

    assert flags(2) == [0] and flags(3) == [1] and flags(5) == [3]
    assert flags(6) == [] and flags(7) == []      # r2 is newest, user still on r1
    assert flags(8) == [2] and flags(9) == [3]    # adopted r2 at age 2
    assert flags(10) == [] and flags(11) == []    # r3 is newest, user on r2
    assert set(np.unique(wait.sum(axis=1))) <= {0.0, 1.0}


def test_never_on_latest_has_zero_wait_block(tiny_window):
    panel = Panel(
        window=tiny_window,
        users=[_user(tiny_window, "u", {t: {"r0": 2} for t in range(1, 13)}, known=True)],
    )
    schema = ColumnSchema.for_window(tiny_window, 1)
    (dp,) = build_design(panel, schema)
    assert not dp.f[:, schema.wait_slice].any()


def test_static_columns_copy_user_record(tiny_window):
    resp = np.linspace(5, 20, 12)
    user = _user(tiny_window, "u", {4: {"r1": 3}, 8: {"r2": 1}}, resp)
    panel = Panel(window=tiny_window, users=[user])
    schema = ColumnSchema.for_window(tiny_window, 1)
    (dp,) = build_design(panel, schema)
    assert np.array_equal(dp.f[:, schema.upgrade_col], user.upgrade_weeks[1:].astype(float))
    assert np.array_equal(dp.f[:, schema.virgin_col], np.ones(11))
    assert np.array_equal(dp.f[:, schema.rolling_col], user.rolling_avg[1:])
    assert np.array_equal(dp.f[:, schema.version_slice], user.usage[1:])


def test_build_design_schema_mismatch(tiny_window, small_panel):
    panel, _ = small_panel
    with pytest.raises(ConfigError, match="does not match"):
        build_design(panel, ColumnSchema.for_window(tiny_window, 1))


def test_stale_final_release_overflows_waiting_block():
    window = StudyWindow(n_weeks=12, release_schedule=(("r1", 2),),
                         version_ids=("r0", "r1"), max_wait=6)
    panel = Panel(window=window, users=[_user(window, "u", {1: {"r0": 1}}, known=True)])
    with pytest.raises(SchemaError, match="exceeds"):
        build_design(panel, ColumnSchema.for_window(window, 1))
    with pytest.raises(SchemaError, match="exceeds"):
        waiting_age_matrix(panel)


def test_waiting_age_matrix(tiny_window):
    early = _user(tiny_window, "a", {t: {"r1": 1} for t in range(2, 10)}, known=True)
    never = _user(tiny_window, "b", {t: {"r0": 1} for t in range(1, 13)}, known=True)
    panel = Panel(window=tiny_window, users=[early, never])
    ages = waiting_age_matrix(panel)
    # on r1 while r1 is newest: weeks 2-5 at ages 0..3; stale after r2 ships
    assert list(ages[0]) == [0, 0, 1, 2, 3, 0, 0, 0, 0, 0, 0, 0]
    assert not ages[1].any()


def test_build_design_is_deterministic(small_panel):
    panel, _ = small_panel
    schema = ColumnSchema.for_window(panel.window, 4)
    d1 = build_design(panel, schema)
    d2 = build_design(panel, schema)
    assert all(np.array_equal(a.f, b.f) and np.array_equal(a.y, b.y) for a, b in zip(d1, d2))


# ---------------------------------------------------------------------------
# Counterfactual twins


def _cf_setup(tiny_window, users):
    panel = Panel(window=tiny_window, users=users)
    schema = ColumnSchema.for_window(tiny_window, 1)
    designs = build_design(panel, schema)
    ta = assign_treatment(panel, "r2")
    return panel, schema, designs, ta, build_counterfactual(panel, schema, designs, ta)


def test_counterfactual_moves_cv_mass_to_prior_version(tiny_window):
    rows = {3: {"r1": 2}, 5: {"r1": 2}, 6: {"r2": 3}, 7: {"r2": 1, "r1": 1}, 11: {"r2": 2}}
    _, schema, designs, _, cfs = _cf_setup(
        tiny_window, [_user(tiny_window, "u", rows, known=True)]
    )
    dp, cf = designs[0], cfs[0]
    assert cf.cf_span == (6, 11)  # first through last CV-usage calendar week
    assert not cf.f[:, schema.version_col("r2")].any()
    r1 = schema.version_col("r1")
    for week in (6, 11):
        assert cf.f[cf.row_of_week(week), r1] == 1.0
    assert cf.f[cf.row_of_week(7), r1] == 1.0  # 0.5 factual + 0.5 moved
    # row sums over the version block conserved; everything else untouched
    assert np.allclose(cf.f[:, schema.version_slice].sum(axis=1),
                       dp.f[:, schema.version_slice].sum(axis=1))
    mask = np.ones(schema.d, dtype=bool)
    mask[schema.version_slice] = False
    assert np.array_equal(cf.f[:, mask], dp.f[:, mask])
    assert cf.y is dp.y


def test_counterfactual_prior_version_tie_breaks_newer(tiny_window):
    rows = {5: {"r0": 2, "r1": 2}, 7: {"r2": 4}}
    _, schema, designs, _, cfs = _cf_setup(
        tiny_window, [_user(tiny_window, "u", rows, known=True)]
    )
    cf = cfs[0]
    assert cf.f[cf.row_of_week(7), schema.version_col("r1")] == 1.0
    assert cf.f[cf.row_of_week(7), schema.version_col("r0")] == 0.0


def test_counterfactual_fallback_uses_preceding_version(tiny_window):
    # virgin entering directly on r2: no usage history, falls back to r1
    _, schema, designs, ta, cfs = _cf_setup(
        tiny_window,
        [_user(tiny_window, "v", {7: {"r2": 5}}), _user(tiny_window, "x", {6: {"r2": 1}, 2: {"r1": 1}}, known=True)],
    )
    assert "v" in ta.fallback_user_ids
    cf = next(c for c in cfs if c.user_id == "v")
    assert cf.f[cf.row_of_week(7), schema.version_col("r1")] == 1.0


def test_counterfactual_oldest_version_has_no_fallback():
    window = StudyWindow(n_weeks=6, release_schedule=(("a", 2), ("b", 5)),
                         version_ids=("a", "b"), max_wait=6)
    panel = Panel(window=window, users=[_user(window, "u", {3: {"a": 1}})])
    schema = ColumnSchema.for_window(window, 1)
    designs = build_design(panel, schema)
    ta = assign_treatment(panel, "a")
    with pytest.raises(DataError, match="no fallback prior version"):
        build_counterfactual(panel, schema, designs, ta)


def test_controls_share_factual_design_object(small_panel, small_designs, small_ta):
    panel, _ = small_panel
    schema, designs = small_designs
    cfs = build_counterfactual(panel, schema, designs, small_ta)
    treated = set(small_ta.treated_user_ids)
    by_id = {dp.user_id: dp for dp in designs}
    for cf in cfs:
        if cf.user_id in treated:
            assert cf.cf_span is not None
            assert cf is not by_id[cf.user_id]
        else:
            assert cf is by_id[cf.user_id]


def test_counterfactual_invariants_on_generated_panel(small_panel, small_designs, small_ta):
    panel, _ = small_panel
    schema, designs = small_designs
    cfs = build_counterfactual(panel, schema, designs, small_ta)
    cv = schema.version_col(small_ta.cv)
    mask = np.ones(schema.d, dtype=bool)
    mask[schema.version_slice] = False
    for dp, cf in zip(designs, cfs):
        if cf is dp:
            continue
        assert not cf.f[:, cv].any()
        assert np.allclose(cf.f[:, schema.version_slice].sum(axis=1),
                           dp.f[:, schema.version_slice].sum(axis=1), atol=1e-12)
        assert np.array_equal(cf.f[:, mask], dp.f[:, mask])
        lo, hi = cf.cf_span
        assert dp.first_week <= lo <= hi <= dp.first_week + dp.n_rows - 1
        # span brackets exactly the factual CV rows
        used = np.flatnonzero(dp.f[:, cv] > 0)
        assert (lo, hi) == (dp.first_week + used[0], dp.first_week + used[-1])


# ---------------------------------------------------------------------------
# Collinearity diagnostic


def _instant_adopter_rows():
    rows = {1: {"r0": 1}}
    for t in range(2, 6):
        rows[t] = {"r1": 1}
    for t in range(6, 10):
        rows[t] = {"r2": 1}
    for t in range(10, 13):
        rows[t] = {"r3": 1}
    return rows


def test_collinearity_is_one_for_instant_adopters(tiny_window):
    users = [
        _user(tiny_window, "a", _instant_adopter_rows(), known=True),
        _user(tiny_window, "b", _instant_adopter_rows(), known=True),
        _user(tiny_window, "c", {t: {"r0": 1} for t in range(1, 13)}, known=True),
    ]
    panel = Panel(window=tiny_window, users=users)
    schema = ColumnSchema.for_window(tiny_window, 1)
    designs = build_design(panel, schema)
    ta = assign_treatment(panel, "r2")
    rho = collinearity_diagnostic(designs, schema, ta, week_range=(6, 9))
    assert rho == pytest.approx(1.0)


def test_collinearity_matches_hand_stacked_correlation(tiny_window):
    users = [
        _user(tiny_window, "a", _instant_adopter_rows(), known=True),
        # half their sessions stay on r0 through the r2 era
        _user(tiny_window, "e", {**{t: {"r0": 1} for t in range(1, 6)},
                                 **{t: {"r0": 1, "r2": 1} for t in range(6, 10)}}, known=True),
        _user(tiny_window, "c", {t: {"r0": 1} for t in range(1, 13)}, known=True),
    ]
    panel = Panel(window=tiny_window, users=users)
    schema = ColumnSchema.for_window(tiny_window, 1)
    designs = build_design(panel, schema)
    ta = assign_treatment(panel, "r2")
    # lifetime spans 4 weeks -> k = 4 waiting columns
    x = np.array([1, 1, 1, 1, 0.5, 0.5, 0.5, 0.5, 0, 0, 0, 0])
    y = np.array([1, 1, 1, 1, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0])
    expect = float(np.corrcoef(x, y)[0, 1])
    rho = collinearity_diagnostic(designs, schema, ta, week_range=(6, 9))
    assert rho == pytest.approx(expect, abs=1e-12)
    assert 0.8 < rho < 1.0


def test_collinearity_errors(tiny_window):
    users = [
        _user(tiny_window, "a", _instant_adopter_rows(), known=True),
        _user(tiny_window, "c", {t: {"r0": 1} for t in range(1, 13)}, known=True),
    ]
    panel = Panel(window=tiny_window, users=users)
    schema = ColumnSchema.for_window(tiny_window, 1)
    designs = build_design(panel, schema)
    ta = assign_treatment(panel, "r2")
    with pytest.raises(DataError, match="covers no design rows"):
        collinearity_diagnostic(designs, schema, ta, week_range=(13, 20))
    with pytest.raises(DataError, match="degenerate"):
        collinearity_diagnostic(designs, schema, ta, week_range=(3, 5))


# ---------------------------------------------------------------------------
# Row slicing and debug dump


def test_slice_designs_keeps_true_lag_history(tiny_window):
    resp = np.arange(1.0, 13.0)
    panel = Panel(window=tiny_window, users=[_user(tiny_window, "u", {1: {"r0": 1}}, resp, known=True)])
    schema = ColumnSchema.for_window(tiny_window, 2)
    (dp,) = build_design(panel, schema)
    (sl,) = slice_designs([dp], (5, 8))
    assert sl.first_week == 5
    assert sl.n_rows == 4
    assert np.array_equal(sl.y, resp[4:8])
    assert sl.f[0, 0] == resp[3]  # lag_1 of week 5 reaches outside the slice
    assert sl.f[0, 1] == resp[2]


def test_slice_designs_empty_range_raises(tiny_window):
    panel = Panel(window=tiny_window, users=[_user(tiny_window, "u", {1: {"r0": 1}}, known=True)])
    schema = ColumnSchema.for_window(tiny_window, 2)
    designs = build_design(panel, schema)
    with pytest.raises(DataError, match="leaves no rows"):
        slice_designs(designs, (1, 2))


def test_dump_design_csv_round_trips(tiny_window, tmp_path):
    resp = np.linspace(3, 40, 12)
    panel = Panel(window=tiny_window, users=[_user(tiny_window, "u", {4: {"r1": 3}}, resp)])
    schema = ColumnSchema.for_window(tiny_window, 1)
    (dp,) = build_design(panel, schema)
    path = tmp_path / "design.csv"
    dump_design_csv(dp, schema, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == ["week", "y", *schema.column_names]
    assert len(lines) == 1 + dp.n_rows
    first = lines[1].split(",")
    assert int(first[0]) == dp.first_week
    assert float(first[1]) == dp.y[0]
    assert [float(v) for v in first[2:]] == list(dp.f[0])

"""Sampling primitives: conjugate moments, variate laws, reductions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from releaselift.errors import SpdError
from releaselift.samplers import (
    RngStream,
    SufficientStats,
    chol_spd,
    conjugate_beta_update,
    draw_inv_gamma,
    draw_inv_wishart,
    draw_mvn,
)


def _spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


# ---------------------------------------------------------------------------
# RngStream

def test_stream_draws_depend_only_on_path():
    a = RngStream(99).generator("beta", 12).standard_normal(5)
    b = RngStream(99).generator("beta", 12).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_stream_distinct_paths_differ():
    s = RngStream(99)
    a = s.generator("beta", 12).standard_normal(5)
    b = s.generator("beta", 13).standard_normal(5)
    c = s.generator("gamma", 12).standard_normal(5)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_stream_string_and_int_parts_are_distinguished():
    s = RngStream(3)
    a = s.generator("u", 7).standard_normal(3)
    b = s.generator("u", "7").standard_normal(3)
    assert not np.allclose(a, b)


def test_child_stream_is_reproducible():
    a = RngStream(5).child("sim", 2).generator("x").standard_normal(4)
    b = RngStream(5).child("sim", 2).generator("x").standard_normal(4)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# chol_spd

def test_chol_matches_numpy_on_clean_spd():
    m = _spd(np.random.default_rng(0), 4)
    np.testing.assert_allclose(chol_spd(m), np.linalg.cholesky(m))


def test_chol_jitters_semidefinite_matrix():
    # Rank-1 PSD: plain cholesky fails, the ladder must recover.
    v = np.array([1.0, 2.0, 3.0])
    m = np.outer(v, v)
    L = chol_spd(m)
    np.testing.assert_allclose(L @ L.T, m, atol=1e-4)


def test_chol_rejects_indefinite_matrix():
    with pytest.raises(SpdError, match="condition"):
        chol_spd(np.diag([1.0, -1.0]))


def test_chol_batched_matches_loop():
    rng = np.random.default_rng(1)
    mats = np.stack([_spd(rng, 3) for _ in range(5)])
    batch = chol_spd(mats)
    for k in range(5):
        np.testing.assert_allclose(batch[k], np.linalg.cholesky(mats[k]))


# ---------------------------------------------------------------------------
# draw_mvn

def test_mvn_zero_cov_returns_mean():
    g = np.random.default_rng(2)
    mean = np.array([3.0, -1.0])
    draw = draw_mvn(mean, np.zeros((2, 2)), g)
    np.testing.assert_allclose(draw, mean, atol=1e-5)


def test_mvn_mean_shift_invariance():
    mean = np.array([5.0, -2.0])
    cov = np.eye(2)
    a = draw_mvn(np.zeros(2), cov, np.random.default_rng(3), size=8)
    b = draw_mvn(mean, cov, np.random.default_rng(3), size=8)
    np.testing.assert_allclose(b, a + mean)


def test_mvn_sample_cov_near_identity():
    draws = draw_mvn(np.zeros(2), np.eye(2), np.random.default_rng(4), size=100_000)
    emp = np.cov(draws.T)
    assert np.max(np.abs(emp - np.eye(2))) < 0.05


def test_mvn_respects_given_chol():
    cov = np.diag([4.0, 9.0])
    chol = np.linalg.cholesky(cov)
    a = draw_mvn(np.zeros(2), cov, np.random.default_rng(5), size=4)
    b = draw_mvn(np.zeros(2), None, np.random.default_rng(5), size=4, chol=chol)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# draw_inv_wishart

def test_inv_wishart_scalar_case_mean():
    # d=1 is a scaled inverse-chi-square with mean scale/(df-2).
    g = np.random.default_rng(6)
    df, scale = 12.0, np.array([[3.0]])
    draws = np.array([draw_inv_wishart(df, scale, g)[0, 0] for _ in range(100_000)])
    expect = 3.0 / (df - 2.0)
    assert abs(draws.mean() - expect) < 0.02 * expect


def test_inv_wishart_matrix_mean():
    g = np.random.default_rng(7)
    df = 15.0
    scale = np.array([[2.0, 0.4], [0.4, 1.0]])
    acc = np.zeros((2, 2))
    m = 40_000
    for _ in range(m):
        acc += draw_inv_wishart(df, scale, g)
    expect = scale / (df - 2 - 1)
    np.testing.assert_allclose(acc / m, expect, rtol=0.03)


def test_inv_wishart_output_symmetric_spd():
    g = np.random.default_rng(8)
    for _ in range(50):
        s = draw_inv_wishart(6.0, _spd(np.random.default_rng(9), 3), g)
        np.testing.assert_array_equal(s, s.T)
        assert np.linalg.eigvalsh(s)[0] > 0


def test_inv_wishart_concentrates_at_large_df():
    g = np.random.default_rng(10)
    lo = [np.linalg.norm(draw_inv_wishart(50.0, np.eye(2) * 47.0, g) - np.eye(2))
          for _ in range(200)]
    hi = [np.linalg.norm(draw_inv_wishart(500.0, np.eye(2) * 497.0, g) - np.eye(2))
          for _ in range(200)]
    assert np.mean(hi) < 0.5 * np.mean(lo)


def test_inv_wishart_df_guard():
    with pytest.raises(SpdError, match="df"):
        draw_inv_wishart(0.5, np.eye(2), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# draw_inv_gamma

def test_inv_gamma_mean():
    g = np.random.default_rng(11)
    draws = draw_inv_gamma(3.0, 2.0, g, size=100_000)
    assert abs(draws.mean() - 1.0) < 0.02


def test_inv_gamma_heavy_tail_no_crash():
    g = np.random.default_rng(12)
    draws = draw_inv_gamma(0.5, 1.0, g, size=1000)
    assert np.all(draws > 0)
    assert np.all(np.isfinite(draws))


def test_inv_gamma_rate_scaling_on_same_stream():
    a = draw_inv_gamma(2.5, 1.0, np.random.default_rng(13), size=64)
    b = draw_inv_gamma(2.5, 7.0, np.random.default_rng(13), size=64)
    np.testing.assert_allclose(b, 7.0 * a, rtol=1e-12)


def test_inv_gamma_rejects_nonpositive_params():
    g = np.random.default_rng(14)
    with pytest.raises(SpdError):
        draw_inv_gamma(0.0, 1.0, g)
    with pytest.raises(SpdError):
        draw_inv_gamma(1.0, -2.0, g)


# ---------------------------------------------------------------------------
# conjugate_beta_update

def test_conjugate_update_matches_dense_oracle():
    rng = np.random.default_rng(15)
    T, d = 3, 2
    f = rng.standard_normal((T, d))
    y = rng.standard_normal(T)
    w_gamma = rng.standard_normal(T)
    mu = rng.standard_normal(d)
    sigma = _spd(rng, d)
    nu = 1.7
    m, C = conjugate_beta_update(y, f, w_gamma, mu, sigma, nu)
    # Independent textbook formula with explicit inverses.
    sig_inv = np.linalg.inv(sigma)
    C_ref = np.linalg.inv(sig_inv + f.T @ f / nu)
    m_ref = C_ref @ (f.T @ (y - w_gamma) / nu + sig_inv @ mu)
    np.testing.assert_allclose(m, m_ref, atol=1e-10)
    np.testing.assert_allclose(C, C_ref, atol=1e-10)


def test_conjugate_update_no_data_returns_prior():
    rng = np.random.default_rng(16)
    d = 3
    mu = rng.standard_normal(d)
    sigma = _spd(rng, d)
    m, C = conjugate_beta_update(np.zeros(4), np.zeros((4, d)), np.zeros(4),
                                 mu, sigma, 2.0)
    np.testing.assert_allclose(m, mu, atol=1e-10)
    np.testing.assert_allclose(C, sigma, atol=1e-8)


def test_conjugate_update_cov_grows_with_nu():
    rng = np.random.default_rng(17)
    f = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    mu = np.zeros(2)
    sigma = _spd(rng, 2)
    prev = None
    for nu in (0.5, 5.0, 50.0, 5000.0):
        _, C = conjugate_beta_update(y, f, np.zeros(6), mu, sigma, nu)
        if prev is not None:
            # Loewner order: C(nu_hi) - C(nu_lo) is PSD.
            assert np.linalg.eigvalsh(C - prev)[0] > -1e-12
        prev = C
    np.testing.assert_allclose(prev, sigma, rtol=1e-2)


def test_conjugate_update_singular_sigma_errors():
    with pytest.raises(SpdError):
        conjugate_beta_update(np.zeros(2), np.zeros((2, 2)), np.zeros(2),
                              np.zeros(2), np.diag([1.0, -1.0]), 1.0)


# ---------------------------------------------------------------------------
# SufficientStats

def _direct_stats(beta, resid, mu, gamma):
    scatter = np.zeros((beta.shape[1],) * 2)
    for b in beta - mu:
        scatter += np.outer(b, b)
    sse = float(((resid - gamma) ** 2).sum())
    return scatter, sse


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=24),
    cuts=st.lists(st.integers(min_value=0, max_value=23), max_size=4),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_stats_sharding_is_associative(n, cuts, seed):
    rng = np.random.default_rng(seed)
    d, W = 3, 5
    beta = rng.standard_normal((n, d))
    resid = rng.standard_normal((n, W))

    whole = SufficientStats(d=d, n_weeks=W)
    whole.accumulate(beta, resid)

    bounds = sorted({0, n, *[c % (n + 1) for c in cuts]})
    sharded = SufficientStats(d=d, n_weeks=W)
    for lo, hi in zip(bounds, bounds[1:]):
        piece = SufficientStats(d=d, n_weeks=W)
        if hi > lo:
            piece.accumulate(beta[lo:hi], resid[lo:hi])
        sharded.merge(piece)

    assert sharded.n == whole.n == n
    np.testing.assert_allclose(sharded.sum_beta, whole.sum_beta, atol=1e-9)
    mu = rng.standard_normal(d)
    gamma = rng.standard_normal(W)
    np.testing.assert_allclose(sharded.scatter_about(mu),
                               whole.scatter_about(mu), atol=1e-9)
    np.testing.assert_allclose(sharded.sse_about(gamma),
                               whole.sse_about(gamma), atol=1e-9)


def test_stats_match_direct_formulas():
    rng = np.random.default_rng(18)
    n, d, W = 17, 4, 6
    beta = rng.standard_normal((n, d)) * 3.0
    resid = rng.standard_normal((n, W)) * 2.0
    mu = rng.standard_normal(d)
    gamma = rng.standard_normal(W)
    stats = SufficientStats(d=d, n_weeks=W)
    stats.accumulate(beta, resid)
    scatter_ref, sse_ref = _direct_stats(beta, resid, mu, gamma)
    np.testing.assert_allclose(stats.scatter_about(mu), scatter_ref, atol=1e-9)
    np.testing.assert_allclose(stats.sse_about(gamma), sse_ref, atol=1e-9)
    np.testing.assert_allclose(stats.beta_mean, beta.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(stats.sum_resid, resid.sum(axis=0), atol=1e-12)


def test_stats_shape_guards():
    stats = SufficientStats(d=2, n_weeks=3)
    with pytest.raises(ValueError):
        stats.accumulate(np.zeros((2, 2)), np.zeros((3, 3)))
    other = SufficientStats(d=2, n_weeks=4)
    with pytest.raises(ValueError):
        stats.merge(other)

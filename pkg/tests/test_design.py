import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopp.design import (
    DOptimalDesign,
    SingularDesignError,
    add_intercept,
    default_ridge,
    equivalence_gap,
    extract_coreset,
    log_det,
    solve_doptimal,
)

from . import oracles


def test_orthonormal_basis_gives_uniform_weights():
    for d in (1, 2, 5):
        res = solve_doptimal(np.eye(d), tolerance=1e-9)
        np.testing.assert_allclose(res.weights, np.full(d, 1 / d), atol=1e-12)
        assert res.converged and res.iterations == 0


def test_identical_rows_stay_uniform():
    X = np.full((7, 1), 2.5)
    res = solve_doptimal(X, tolerance=1e-9)
    np.testing.assert_allclose(res.weights, np.full(7, 1 / 7))


def test_interior_points_get_no_weight():
    # square corners plus interior points: the optimum sits on the corners
    corners = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    X = np.vstack([corners, [[0.1, 0.2], [-0.3, 0.0], [0.0, 0.5]]])
    res = solve_doptimal(X, tolerance=1e-8, max_iterations=100_000)
    np.testing.assert_allclose(res.weights[:4], 0.25, atol=1e-4)
    assert res.weights[4:].max() < 1e-4


def test_skewed_design_fails_equivalence():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert equivalence_gap(X, [0.98, 0.01, 0.01]) > 2
    res = solve_doptimal(X, tolerance=1e-6)
    assert res.gap <= 2 * (1 + 1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 40))
@settings(max_examples=60, deadline=None)
def test_certificate_and_monotone_history(seed, d, extra):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(d + extra, d)) * rng.uniform(0.1, 10, size=d)
    res = solve_doptimal(X, tolerance=1e-3, record_history=True)
    assert res.converged
    assert res.gap <= d * 1.001
    assert equivalence_gap(X, res.weights, res.ridge) == pytest.approx(res.gap, rel=1e-9)
    h = np.array(res.history)
    assert np.all(np.diff(h) >= -1e-10 * np.maximum(1, np.abs(h[1:])))
    assert abs(res.weights.sum() - 1) < 1e-12 and res.weights.min() >= 0


def test_scale_invariance():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 4))
    a = solve_doptimal(X, tolerance=1e-6)
    for c in (1e-3, 7.0, 1e4):
        b = solve_doptimal(c * X, tolerance=1e-6)
        np.testing.assert_allclose(b.weights, a.weights, atol=1e-9)


def test_matches_simplex_grid_small():
    rng = np.random.default_rng(7)
    for _ in range(10):
        d = int(rng.integers(1, 4))
        N = int(rng.integers(d, 7))
        X = rng.normal(size=(N, d))
        res = solve_doptimal(X, tolerance=1e-7, max_iterations=100_000)
        best, _ = oracles.simplex_grid_logdet(X, step=0.05)
        assert log_det(X, res.weights) >= best - 1e-6


def test_support_reduced_grid_at_n12():
    # the optimum has support at most d(d+1)/2 = 3 for d = 2
    rng = np.random.default_rng(11)
    X = rng.normal(size=(12, 2))
    res = solve_doptimal(X, tolerance=1e-7, max_iterations=100_000)
    best, _ = oracles.simplex_grid_logdet(X, step=0.01, support=3)
    assert log_det(X, res.weights) >= best - 1e-6


def test_matches_cvxpy_at_n12():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(5)
    for d in (2, 4, 6):
        X = rng.normal(size=(12, d))
        w = cp.Variable(12, nonneg=True)
        M = sum(w[i] * np.outer(X[i], X[i]) for i in range(12))
        prob = cp.Problem(cp.Maximize(cp.log_det(M)), [cp.sum(w) == 1])
        prob.solve(solver="CLARABEL")
        res = solve_doptimal(X, tolerance=1e-8, max_iterations=200_000)
        ours = log_det(X, res.weights)
        assert ours >= prob.value - 1e-6
        assert ours - prob.value < 1e-5


def test_rank_deficient_without_ridge():
    X = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularDesignError):
        log_det(X, [0.5, 0.5], ridge=0.0)
    # the ridge keeps the solver well defined
    res = solve_doptimal(X)
    assert np.isfinite(res.gap)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.array([[1.0, np.nan]]), np.zeros((2, 0))])
def test_bad_features(bad):
    with pytest.raises(ValueError):
        solve_doptimal(bad)


def test_default_ridge():
    X = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert default_ridge(X) == pytest.approx(1e-8 * 12.5 / 2)
    assert default_ridge(np.zeros((3, 2))) == 1e-8


def test_coreset_examples():
    w = np.array([0.5, 0.005, 0.3, 0.02, 0.005, 0.17])
    c = extract_coreset(w, threshold=0.01, min_size=2, uids=[10, 11, 12, 13, 14, 15])
    assert c.indices == [10, 12, 15, 13] and c.above_threshold == c.indices
    padded = extract_coreset(w, threshold=0.01, min_size=6)
    # ties broken by lower uid
    assert padded.indices == [0, 2, 5, 3, 1, 4]
    assert padded.above_threshold == [0, 2, 5, 3]
    assert extract_coreset(w, threshold=0.3, min_size=0).indices == [0]
    with pytest.raises(ValueError):
        extract_coreset(w, threshold=-1)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 0.2), st.floats(0, 0.2))
def test_coreset_threshold_monotone(ws, t1, t2):
    lo, hi = sorted((t1, t2))
    w = np.array(ws)
    assert set(extract_coreset(w, hi, 0).indices) <= set(extract_coreset(w, lo, 0).indices)


def test_estimator():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    est = DOptimalDesign(tolerance=1e-6).fit(X)
    ref = solve_doptimal(add_intercept(X), tolerance=1e-6)
    np.testing.assert_array_equal(est.weights_, ref.weights)
    assert est.n_features_in_ == 3
    assert est.log_det(X) == pytest.approx(log_det(add_intercept(X), ref.weights, ref.ridge))
    assert len(est.coreset(threshold=0.0, min_size=0)) == int((est.weights_ > 0).sum())

"""Tests for sketch distributions and sketched Newton-direction solvers."""

import numpy as np
import pytest

from snewt.sketch import (
    SketchDistribution,
    SketchSolveConfig,
    draw_sketch,
    exact_newton_solve,
    pinv_newton_solve,
    projection_matrix,
    sketch_project_step,
    solve_newton_sketched,
)
from tests.oracles import coordinate_sketches, sketch_loop


def _random_spd(rng, d, ridge=0.5):
    A = rng.standard_normal((d, d))
    return A @ A.T + ridge * np.eye(d)


# ---------------------------------------------------------------------------
# sketch draws


def test_uniform_coordinate_sketch_is_canonical_column():
    rng = np.random.default_rng(0)
    expected_idx = int(np.random.default_rng(0).integers(0, 4))
    s = draw_sketch(SketchDistribution(), 4, rng)
    assert s.shape == (4, 1)
    col = np.zeros((4, 1))
    col[expected_idx, 0] = 1.0
    assert np.array_equal(s, col)


def test_uniform_coordinate_frequencies_are_uniform():
    rng = np.random.default_rng(1)
    d, n = 4, 100_000
    counts = np.zeros(d)
    dist = SketchDistribution()
    for _ in range(n):
        s = draw_sketch(dist, d, rng)
        counts[int(np.argmax(s[:, 0]))] += 1
    assert np.abs(counts / n - 1.0 / d).max() < 0.01


def test_gaussian_sketch_moments():
    d, q, n = 3, 2, 20_000
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 1.0]])
    dist = SketchDistribution(kind="gaussian", q=q, cov=cov)
    rng = np.random.default_rng(2)
    cols = np.empty((n * q, d))
    for i in range(n):
        s = draw_sketch(dist, d, rng)
        assert s.shape == (d, q)
        cols[2 * i] = s[:, 0]
        cols[2 * i + 1] = s[:, 1]
    emp = cols.T @ cols / (n * q)
    assert np.abs(cols.mean(axis=0)).max() < 0.02
    assert np.linalg.norm(emp - cov, 2) / np.linalg.norm(cov, 2) < 0.05


def test_gaussian_sketch_without_cov_is_standard_normal_block():
    dist = SketchDistribution(kind="gaussian", q=2)
    s = draw_sketch(dist, 3, np.random.default_rng(5))
    z = np.random.default_rng(5).standard_normal((3, 2))
    assert np.array_equal(s, z)


def test_column_block_sketch_selects_distinct_columns():
    dist = SketchDistribution(kind="column_block", q=2)
    s = draw_sketch(dist, 5, np.random.default_rng(3))
    assert s.shape == (5, 2)
    assert np.array_equal(np.sort(s.sum(axis=0)), [1.0, 1.0])
    assert np.array_equal(s.T @ s, np.eye(2))  # distinct canonical columns


def test_distribution_validation():
    with pytest.raises(ValueError):
        SketchDistribution(kind="uniform_coordinate", q=2)
    with pytest.raises(ValueError):
        SketchDistribution(kind="uniform_coordinate", cov=np.eye(2))
    with pytest.raises(ValueError):
        SketchDistribution(kind="subsampled_hadamard")
    with pytest.raises(ValueError):
        SketchSolveConfig(tau=0)
    with pytest.raises(ValueError):
        SketchSolveConfig(pinv_tol=0.0)
    assert SketchSolveConfig().is_exact
    assert not SketchSolveConfig(tau=3).is_exact


# ---------------------------------------------------------------------------
# single projection steps


def test_coordinate_projection_hand_example():
    B = np.eye(2)
    g = np.array([3.0, 4.0])
    S = np.array([[1.0], [0.0]])
    dx = sketch_project_step(B, g, np.zeros(2), S)
    assert np.array_equal(dx, [-3.0, 0.0])


def test_projection_step_satisfies_sketched_equation():
    rng = np.random.default_rng(7)
    for _ in range(20):
        B = _random_spd(rng, 4)
        g = rng.standard_normal(4)
        S = rng.standard_normal((4, 2))
        dx = sketch_project_step(B, g, rng.standard_normal(4), S)
        assert np.abs(S.T @ (B @ dx + g)).max() < 1e-9


def test_projection_step_never_increases_error():
    rng = np.random.default_rng(8)
    for _ in range(300):
        d = int(rng.integers(2, 6))
        B = _random_spd(rng, d)
        g = rng.standard_normal(d)
        target = np.linalg.solve(B, -g)
        dx = rng.standard_normal(d)
        q = int(rng.integers(1, 3))
        S = rng.standard_normal((d, q))
        dx_new = sketch_project_step(B, g, dx, S)
        before = np.linalg.norm(dx - target)
        after = np.linalg.norm(dx_new - target)
        assert after <= before * (1.0 + 1e-12) + 1e-14


def test_degenerate_sketch_leaves_iterate_unchanged():
    B = np.diag([1.0, 0.0])
    dx = np.array([0.3, -0.7])
    S = np.array([[0.0], [1.0]])
    out = sketch_project_step(B, np.ones(2), dx, S, tol=1e-12)
    assert np.array_equal(out, dx)
    assert np.array_equal(projection_matrix(B, S, tol=1e-12), np.zeros((2, 2)))


def test_projection_matrix_is_symmetric_idempotent():
    rng = np.random.default_rng(9)
    for q in (1, 2):
        B = _random_spd(rng, 4)
        S = rng.standard_normal((4, q))
        P = projection_matrix(B, S)
        assert np.allclose(P, P.T, atol=1e-12)
        assert np.allclose(P @ P, P, atol=1e-10)
        assert abs(np.trace(P) - q) < 1e-10


# ---------------------------------------------------------------------------
# full solves


def test_exact_solve_diagonal_hand_example():
    dx = exact_newton_solve(np.diag([1.0, 2.0]), np.array([1.0, 1.0]))
    assert np.array_equal(dx, [-1.0, -0.5])


def test_exact_solve_rejects_indefinite_matrix():
    with pytest.raises(np.linalg.LinAlgError):
        exact_newton_solve(np.diag([1.0, -1.0]), np.ones(2))


def test_pinv_solve_handles_singular_and_zero_matrices():
    dx = pinv_newton_solve(np.diag([2.0, 0.0]), np.array([1.0, 1.0]))
    assert np.allclose(dx, [-0.5, 0.0], atol=1e-15)
    assert np.array_equal(pinv_newton_solve(np.zeros((2, 2)), np.ones(2)),
                          np.zeros(2))


def test_uc_solve_on_identity_reaches_exact_direction():
    g = np.array([0.25, -1.5, 2.0])
    cfg = SketchSolveConfig(dist=SketchDistribution(), tau=16)
    dx = solve_newton_sketched(np.eye(3), g, cfg, np.random.default_rng(5))
    assert np.array_equal(dx, -g)


def test_sketched_solve_requires_generator():
    cfg = SketchSolveConfig(dist=SketchDistribution(), tau=2)
    with pytest.raises(ValueError):
        solve_newton_sketched(np.eye(2), np.ones(2), cfg, None)


def test_exact_config_ignores_generator():
    cfg = SketchSolveConfig()
    dx = solve_newton_sketched(np.diag([4.0, 1.0]), np.array([2.0, 3.0]), cfg)
    assert np.allclose(dx, [-0.5, -3.0], atol=1e-15)


def test_uc_solve_matches_straight_line_replay():
    rng = np.random.default_rng(13)
    B = _random_spd(rng, 4)
    g = rng.standard_normal(4)
    cfg = SketchSolveConfig(dist=SketchDistribution(), tau=8)
    seed = 1234
    dx = solve_newton_sketched(B, g, cfg, np.random.default_rng(seed))
    # replay the documented draw order: tau indices in one batched call
    idx = np.random.default_rng(seed).integers(0, 4, size=8)
    expected = sketch_loop(B, g, coordinate_sketches(idx, 4))
    assert np.abs(dx - expected).max() < 5e-13


def test_gaussian_solve_matches_straight_line_replay():
    rng = np.random.default_rng(14)
    B = _random_spd(rng, 3)
    g = rng.standard_normal(3)
    cov = np.array([[1.0, 0.2, 0.0], [0.2, 1.0, 0.0], [0.0, 0.0, 2.0]])
    dist = SketchDistribution(kind="gaussian", q=2, cov=cov)
    cfg = SketchSolveConfig(dist=dist, tau=4)
    seed = 77
    dx = solve_newton_sketched(B, g, cfg, np.random.default_rng(seed))
    # replay the documented draw order: one (tau, d, q) normal block
    z = np.random.default_rng(seed).standard_normal((4, 3, 2))
    chol = dist.cov_factor(3)
    expected = sketch_loop(B, g, [chol @ z[j] for j in range(4)])
    assert np.abs(dx - expected).max() < 1e-10


def test_column_block_solve_matches_straight_line_replay():
    rng = np.random.default_rng(15)
    B = _random_spd(rng, 4)
    g = rng.standard_normal(4)
    dist = SketchDistribution(kind="column_block", q=2)
    cfg = SketchSolveConfig(dist=dist, tau=3)
    seed = 4321
    dx = solve_newton_sketched(B, g, cfg, np.random.default_rng(seed))
    # replay: one without-replacement choice per projection step
    rng2 = np.random.default_rng(seed)
    sketches = [draw_sketch(dist, 4, rng2) for _ in range(3)]
    expected = sketch_loop(B, g, sketches)
    assert np.abs(dx - expected).max() < 1e-10

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lpnet.goal import (
    GoalNotConverged,
    GoalSolveSettings,
    assign_owners,
    goal_objective,
    penalty_solve,
    solve_goal,
    split_pos_neg,
)
from lpnet.objective import discrimination
from lpnet.transforms import snt


def exhaustive_optimum(Q, labels, lam1):
    """Enumerate every per-entry support pattern (zero / positive / negative)
    and keep the best feasible one. Each pattern fixes the optimal value of
    each entry, so this is exact on tiny instances.
    """
    M, N = Q.shape
    best = np.inf
    for pattern in itertools.product((0, 1, -1), repeat=M * N):
        P = np.array(pattern).reshape(M, N)
        G = np.where(P == 1, np.maximum(Q - lam1, 0), np.where(P == -1, np.minimum(Q + lam1, 0), 0.0))
        # a pattern is only admissible when its entries keep their declared sign
        if np.any((P == 1) & (G <= 0)) or np.any((P == -1) & (G >= 0)):
            continue
        if discrimination(G, labels) > 0:
            continue
        best = min(best, goal_objective(Q, G, lam1))
    return best


def test_split_pos_neg():
    p, n = split_pos_neg(np.array([1.0, -2.0, 0.0]))
    assert p.tolist() == [1, 0, 0] and n.tolist() == [0, 2, 0]
    p, n = split_pos_neg(-np.ones(3))
    assert not p.any()
    g = np.random.default_rng(0).standard_normal(7)
    p, n = split_pos_neg(g)
    np.testing.assert_array_equal(p - n, g)
    assert p @ n == 0


def test_feasible_input_is_only_thresholded():
    Q = np.array([[2.0, 0.0], [0.0, -3.0], [0.5, 0.0]])
    labels = np.array([0, 1])
    for method in ("assign", "penalty"):
        G = solve_goal(Q, labels, 0.2, GoalSolveSettings(method=method))
        np.testing.assert_allclose(G, snt(Q, 0.2), atol=1e-12)
        assert discrimination(G, labels) == 0


def test_single_class_is_plain_prox(rng):
    Q = rng.standard_normal((4, 5))
    np.testing.assert_array_equal(solve_goal(Q, np.zeros(5, int), 0.3), snt(Q, 0.3))


def test_zero_input():
    assert not solve_goal(np.zeros((3, 4)), np.array([0, 0, 1, 1]), 0.1).any()


def test_symmetric_two_by_two():
    Q = np.ones((2, 2))
    labels = np.array([0, 1])
    for method in ("assign", "penalty"):
        G = solve_goal(Q, labels, 0.0, GoalSolveSettings(method=method))
        assert discrimination(G, labels) <= 1e-6
        assert goal_objective(Q, G, 0.0) == pytest.approx(exhaustive_optimum(Q, labels, 0.0), abs=1e-6)


def test_assign_matches_exhaustive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(40):
        K = rng.integers(1, 3)
        C = rng.integers(2, 4)
        if C * K > 4:
            K = 1
        labels = np.repeat(np.arange(C), K)
        Q = rng.standard_normal((2, C * K)) * 2
        lam1 = rng.uniform(0, 1)
        G = assign_owners(Q, labels, lam1)
        assert discrimination(G, labels) == 0
        assert goal_objective(Q, G, lam1) == pytest.approx(exhaustive_optimum(Q, labels, lam1), abs=1e-9)


def test_penalty_inner_sweeps_descend():
    rng = np.random.default_rng(6)
    for _ in range(20):
        labels = np.repeat([0, 1, 2], 3)
        Q = rng.standard_normal((5, 9))
        _, trace = penalty_solve(Q, labels, 0.1, GoalSolveSettings(method="penalty", tol_D=1e-8, max_outer=20))
        for hist in trace.objective:
            inc = np.diff(hist)
            assert np.all(inc <= 1e-9 * np.abs(hist[:-1]) + 1e-12)


def test_penalty_declares_non_convergence():
    rng = np.random.default_rng(7)
    Q = rng.standard_normal((6, 8)) + 3
    settings = GoalSolveSettings(method="penalty", max_outer=1, inner_iters=1, lam0_init=1e-6)
    with pytest.raises(GoalNotConverged) as info:
        solve_goal(Q, np.repeat([0, 1], 4), 0.01, settings)
    assert info.value.D > 1e-6


def test_settings_validation():
    with pytest.raises(ValueError):
        GoalSolveSettings(tol_D=0)
    with pytest.raises(ValueError):
        GoalSolveSettings(lam0_growth=1.0)
    with pytest.raises(ValueError):
        GoalSolveSettings(method="projection")


@given(st.integers(0, 2**31), st.sampled_from(["assign", "penalty"]))
def test_output_supports_are_separated(seed, method):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 4))
    K = int(rng.integers(1, 5))
    labels = np.repeat(np.arange(C), K)
    Q = rng.standard_normal((int(rng.integers(1, 9)), C * K))
    try:
        G = solve_goal(Q, labels, float(rng.uniform(0, 0.5)), GoalSolveSettings(method=method))
    except GoalNotConverged:
        return
    assert discrimination(G, labels) <= 1e-6
    for i, j in itertools.product(range(C * K), repeat=2):
        if labels[i] != labels[j]:
            assert np.sum((G[:, i] * G[:, j]) ** 2) <= 1e-6

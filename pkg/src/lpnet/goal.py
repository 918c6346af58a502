"""Exact-goal representations under the discrimination constraint.

Solves::

    min_G 0.5*||Q - G||_F^2 + lambda1 * sum ||g||_1   s.t.  D(G) = 0

Every term of ``D`` is nonnegative and the Hadamard term vanishes only when
``g[m] * g'[m] == 0`` for all cross-class pairs, so ``D(G) = 0`` holds iff
each row of ``G`` is nonzero in at most one class. The problem therefore
splits over rows: each row picks an owning class whose entries take the
soft-threshold value, and the rest are zero.

Two solvers share that interface:

``assign``
    Picks, per row, the owner with the largest objective reduction. This is
    the global minimizer.
``penalty``
    Penalty continuation on ``lambda0 * D(G)`` with block-coordinate sweeps
    over columns. Each column update is a closed-form shifted and rescaled
    soft threshold, so the penalized objective never increases at fixed
    ``lambda0``. The final iterate is snapped onto the feasible set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objective import discrimination
from .transforms import snt


class GoalNotConverged(RuntimeError):
    def __init__(self, D: float):
        super().__init__(f"goal solver did not reach feasibility (D(G) = {D:.3e})")
        self.D = D


@dataclass(frozen=True)
class GoalSolveSettings:
    lam0_init: float = 1.0
    lam0_growth: float = 4.0
    inner_iters: int = 10
    tol_D: float = 1e-6
    max_outer: int = 12
    method: str = "assign"

    def __post_init__(self):
        if self.tol_D <= 0:
            raise ValueError("tol_D must be > 0")
        if self.lam0_growth <= 1:
            raise ValueError("lam0_growth must be > 1")
        if self.method not in ("assign", "penalty"):
            raise ValueError(f"unknown goal method {self.method!r}")


@dataclass
class PenaltyTrace:
    lam0: list[float] = field(default_factory=list)
    # penalized objective after each inner sweep, one list per outer round
    objective: list[list[float]] = field(default_factory=list)
    D: list[float] = field(default_factory=list)


def split_pos_neg(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(g, 0.0), np.maximum(-g, 0.0)


def goal_objective(Q: np.ndarray, G: np.ndarray, lam1: float) -> float:
    return 0.5 * float(np.sum((Q - G) ** 2)) + lam1 * float(np.abs(G).sum())


def solve_goal(Q: np.ndarray, labels, lam1: float, settings: GoalSolveSettings | None = None) -> np.ndarray:
    settings = settings or GoalSolveSettings()
    Q = np.asarray(Q, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(Q)):
        raise ValueError("Q must be finite")
    if not Q.any():
        return np.zeros_like(Q)
    if len(np.unique(labels)) < 2:
        return snt(Q, lam1)
    if settings.method == "assign":
        return assign_owners(Q, labels, lam1)
    G, _ = penalty_solve(Q, labels, lam1, settings)
    return G


def _row_gains(Q: np.ndarray, labels: np.ndarray, lam1: float, classes) -> np.ndarray:
    """Objective reduction, per row and class, of using the prox instead of zero."""
    S = snt(Q, lam1)
    # 0.5 q^2 - (0.5 (q - s)^2 + lam1 |s|)
    gain = 0.5 * Q**2 - 0.5 * (Q - S) ** 2 - lam1 * np.abs(S)
    return np.stack([gain[:, labels == c].sum(axis=1) for c in classes], axis=1)


def assign_owners(Q: np.ndarray, labels, lam1: float) -> np.ndarray:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    gains = _row_gains(Q, labels, lam1, classes)
    owner = classes[np.argmax(gains, axis=1)]  # ties -> lowest class index
    keep = labels[None, :] == owner[:, None]
    return np.where(keep, snt(Q, lam1), 0.0)


def _penalized(Q, G, lam1, lam0, labels) -> float:
    return goal_objective(Q, G, lam1) + lam0 * discrimination(G, labels)


def penalty_solve(Q, labels, lam1, settings: GoalSolveSettings) -> tuple[np.ndarray, PenaltyTrace]:
    labels = np.asarray(labels)
    classes = list(np.unique(labels))
    members = {c: np.flatnonzero(labels == c) for c in classes}
    G = snt(Q, lam1)
    trace = PenaltyTrace()

    def class_sums(c):
        block = G[:, members[c]]
        return np.maximum(block, 0).sum(1), np.maximum(-block, 0).sum(1), (block * block).sum(1)

    D = discrimination(G, labels)
    lam0 = settings.lam0_init
    for _ in range(settings.max_outer):
        if D <= settings.tol_D:
            break
        sums = {c: class_sums(c) for c in classes}
        history = []
        for _ in range(settings.inner_iters):
            for j in range(Q.shape[1]):
                c = labels[j]
                others = [sums[o] for o in classes if o != c]
                P = sum(s[0] for s in others)
                N = sum(s[1] for s in others)
                S = sum(s[2] for s in others)
                q = Q[:, j]
                denom = 1.0 + 4.0 * lam0 * S
                gp = (q - lam1 - 2.0 * lam0 * P) / denom
                gn = (q + lam1 + 2.0 * lam0 * N) / denom
                G[:, j] = np.where(gp > 0, gp, np.where(gn < 0, gn, 0.0))
                sums[c] = class_sums(c)
            history.append(_penalized(Q, G, lam1, lam0, labels))
        trace.lam0.append(lam0)
        trace.objective.append(history)
        D = discrimination(G, labels)
        trace.D.append(D)
        lam0 *= settings.lam0_growth
    if D > settings.tol_D:
        raise GoalNotConverged(D)
    return _snap_feasible(Q, G, labels, lam1), trace


def _snap_feasible(Q, G, labels, lam1) -> np.ndarray:
    """Keep, per row, the best-gain class among those active in ``G``; prox its entries."""
    classes = np.unique(labels)
    active = np.stack([(G[:, labels == c] != 0).any(axis=1) for c in classes], axis=1)
    gains = np.where(active, _row_gains(Q, labels, lam1, classes), -np.inf)
    owner = classes[np.argmax(gains, axis=1)]
    keep = (labels[None, :] == owner[:, None]) & active.any(axis=1)[:, None]
    return np.where(keep, snt(Q, lam1), 0.0)

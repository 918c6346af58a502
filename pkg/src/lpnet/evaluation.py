"""Embedding through a trained network, a linear one-vs-rest SVM on the last
node's representations, and the goal-propagation probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .goal import GoalSolveSettings, solve_goal
from .stages import forward as _forward
from .state import ClassMatrix, HyperParams, WeightSet
from .transforms import snt


def embed(weights: WeightSet, hp: HyperParams, X) -> np.ndarray:
    """Last-node sNT representations ``U_L`` (same recursion as stage one)."""
    X = X.data if isinstance(X, ClassMatrix) else X
    if weights.A[0].shape[1] != np.shape(X)[0]:
        raise ValueError(f"input has {np.shape(X)[0]} features, network expects {weights.A[0].shape[1]}")
    _, U = _forward(weights, hp.per_level("tau"), X)
    return U[-1]


@dataclass
class LinearClassifier:
    """``scores = W x + b``; rows of ``W`` follow ``classes``."""

    W: np.ndarray
    b: np.ndarray
    classes: np.ndarray
    reg: float
    epochs: int
    epochs_run: int = 0
    meta: dict = field(default_factory=dict)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        """Scores, one row per class and one column per sample."""
        return self.W @ X + self.b[:, None]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=0)]


def fit_linear(X: np.ndarray, labels, reg: float = 1e-3, epochs: int = 200, tol: float = 1e-4) -> LinearClassifier:
    """One-vs-rest L2-regularized hinge-loss SVM, one sample per column of ``X``.

    Each binary problem is ``reg/2 ||w||^2 + mean_i hinge(y_i (w.x_i + b))``
    with the bias handled as an extra constant feature. It is solved in the
    dual by coordinate descent with a fixed cyclic sample order (all classes
    advance together), so the result is deterministic. Features are
    standardized internally and the scaling is folded back into ``W, b``.
    Stops after ``epochs`` passes or when the largest projected-gradient
    violation of a pass falls below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    M, N = X.shape
    mu = X.mean(axis=1)
    sd = X.std(axis=1)
    sd[sd == 0] = 1.0
    Z = np.vstack([(X - mu[:, None]) / sd[:, None], np.ones((1, N))])
    C = len(classes)
    Ybin = np.where(labels[None, :] == classes[:, None], 1.0, -1.0)  # C x N
    box = 1.0 / (reg * N)
    sq = np.einsum("ij,ij->j", Z, Z)
    alpha = np.zeros((C, N))
    W = np.zeros((C, M + 1))
    run = 0
    for run in range(1, epochs + 1):
        worst = 0.0
        for i in range(N):
            z = Z[:, i]
            y = Ybin[:, i]
            grad = y * (W @ z) - 1.0
            a = alpha[:, i]
            pg = np.where(a <= 0, np.minimum(grad, 0.0), np.where(a >= box, np.maximum(grad, 0.0), grad))
            worst = max(worst, float(np.abs(pg).max()))
            new = np.clip(a - grad / sq[i], 0.0, box)
            delta = new - a
            if delta.any():
                alpha[:, i] = new
                W += np.outer(delta * y, z)
        if worst < tol:
            break
    Wf = W[:, :M] / sd
    bf = W[:, M] - Wf @ mu
    return LinearClassifier(W=Wf, b=bf, classes=classes, reg=reg, epochs=epochs, epochs_run=run)


def accuracy(clf: LinearClassifier, X: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(clf.predict(X) == labels))


@dataclass(frozen=True)
class ProbeResult:
    raw: float
    normalized: float
    UL_energy: float


def goal_probe(
    weights: WeightSet,
    hp: HyperParams,
    data: ClassMatrix,
    goal_node: int,
    settings: GoalSolveSettings | None = None,
) -> ProbeResult:
    """Propagate the exact-goal representations of ``goal_node`` to level L and
    compare with the sNT representations there.

    ``D_{lG} = G_{lG}``, ``D_l = snt(A_{l-1} D_{l-1}, tau_l)`` for ``l > lG``;
    the raw value is ``0.5||D_L - U_L||^2`` and the normalized one divides by
    ``0.5||U_L||^2`` (defined as 0 when both are zero).
    """
    taus = hp.per_level("tau")
    Q, U = _forward(weights, taus, data.data)
    settings = settings or GoalSolveSettings(method=hp.goal_method)
    D = solve_goal(Q[goal_node], data.labels, hp.level(goal_node).lambda1, settings)
    for l in range(goal_node + 1, weights.L + 1):
        D = snt(weights.A[l - 1] @ D, taus[l - 1])
    raw = 0.5 * float(np.sum((D - U[-1]) ** 2))
    energy = 0.5 * float(np.sum(U[-1] ** 2))
    if energy == 0:
        normalized = 0.0 if raw == 0 else np.inf
    else:
        normalized = raw / energy
    return ProbeResult(raw=raw, normalized=normalized, UL_energy=energy)

"""Terms of the network learning objective.

Per level ``l`` the objective is ``R1 + R2 + R3 + R4 + A`` with

* R1: three transform errors ``0.5||Q-Y||^2 + 0.5||B U_{l+1} - Y||^2 + 0.5||Q-G||^2``
* R2: weight penalty ``V(A_{l-1}) + (lambda5/2)||A_l - B_l^T||^2``
* R3: goal alignment ``sum te . ge``
* R4: propagation alignment ``sum te . flow``
* A:  ``lambda1 (||U||_1 + ||Y||_1 + ||G||_1)``

with ``te = Y - Q``, ``ge = U - G`` and ``flow = lambda_f B_l ge_{l+1} +
lambda_b A_{l-1} ge_{l-1}``. Terms that reference a missing neighbour
(``l = L`` has no ``U_{l+1}``; the input has no goal) are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .state import HyperParams, LevelParams, NodeState, WeightSet


class LogDetError(ArithmeticError):
    """Raised when ``A^T A`` is numerically singular."""


LOGDET_EIG_FLOOR = 1e-12


def te(Q: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Transform error ``Y - Q``."""
    _same_shape(Q, Y)
    return Y - Q


def ge(G: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Goal error ``U - G``."""
    _same_shape(G, U)
    return U - G


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _sq(x: np.ndarray) -> float:
    return float(np.vdot(x, x))


def r1(A_prev, U_prev, Y, G, B=None, U_next=None) -> float:
    Q = A_prev @ U_prev
    _same_shape(Q, Y)
    _same_shape(Q, G)
    val = 0.5 * _sq(Q - Y) + 0.5 * _sq(Q - G)
    if B is not None and U_next is not None:
        BU = B @ U_next
        _same_shape(BU, Y)
        val += 0.5 * _sq(BU - Y)
    return val


def log_abs_det_gram(A: np.ndarray) -> float:
    """``log|det(A^T A)|`` from the Cholesky factor of ``A^T A``.

    Raises ``LogDetError`` when ``A`` is wide, the factorization fails, or a
    squared pivot falls below ``LOGDET_EIG_FLOOR`` relative to the largest.
    """
    if A.shape[0] < A.shape[1]:
        raise LogDetError("log-det undefined: A has more columns than rows")
    try:
        R = linalg.cholesky(A.T @ A, check_finite=False)
    except linalg.LinAlgError as exc:
        raise LogDetError("log-det undefined: A^T A is singular") from exc
    d = np.abs(np.diag(R))
    if d.min() ** 2 < LOGDET_EIG_FLOOR * max(1.0, float(d.max()) ** 2):
        raise LogDetError("log-det undefined: A^T A is numerically singular")
    return float(2.0 * np.sum(np.log(d)))


def weight_penalty(A: np.ndarray, lambda2: float, lambda3: float, lambda4: float) -> float:
    """``V(A)``: Frobenius, coherence and log-det terms."""
    val = 0.5 * lambda2 * _sq(A)
    if lambda3:
        C = A @ A.T
        C[np.diag_indices_from(C)] -= 1.0
        val += 0.5 * lambda3 * _sq(C)
    if lambda4:
        val -= lambda4 * log_abs_det_gram(A)
    return val


def r2(A_prev, lambda2, lambda3, lambda4, A_next=None, B=None, lambda5=0.0) -> float:
    val = weight_penalty(A_prev, lambda2, lambda3, lambda4)
    if A_next is not None and B is not None and lambda5:
        val += 0.5 * lambda5 * _sq(A_next - B.T)
    return val


def sparsity_term(U, Y, G, lambda1: float) -> float:
    return lambda1 * float(np.abs(U).sum() + np.abs(Y).sum() + np.abs(G).sum())


def _class_row_sums(X: np.ndarray, labels: np.ndarray, classes) -> list[np.ndarray]:
    return [X[:, labels == c].sum(axis=1) for c in classes]


def discrimination(G: np.ndarray, labels) -> float:
    """Cross-class overlap of positive parts, negative parts and Hadamard products.

    Summed over ordered pairs of columns from different classes; zero exactly
    when every row is nonzero in at most one class.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        return 0.0
    gp = np.maximum(G, 0.0)
    gn = np.maximum(-G, 0.0)
    total = 0.0
    for part in (gp, gn, G * G):
        sums = _class_row_sums(part, labels, classes)
        for i in range(len(sums)):
            for j in range(i + 1, len(sums)):
                total += 2.0 * float(sums[i] @ sums[j])
    return total


def r3(Q, Y, G, U, psi=None, orientation: int = 1) -> float:
    r = orientation * np.sum(te(Q, Y) * ge(G, U), axis=0)
    return float(np.sum(r if psi is None else psi(r)))


@dataclass(frozen=True)
class FlowTerm:
    forward: np.ndarray   # lambda_f B_l ge_{l+1}
    backward: np.ndarray  # lambda_b A_{l-1} ge_{l-1}

    @property
    def total(self) -> np.ndarray:
        return self.forward + self.backward


def flow(A_prev, B, ge_prev, ge_next, lambda_f: float, lambda_b: float, shape=None) -> FlowTerm:
    """Local diffusion term. ``None`` neighbours contribute zero."""
    if shape is None:
        shape = (A_prev.shape[0], (ge_prev if ge_prev is not None else ge_next).shape[1])
    fwd = np.zeros(shape)
    bwd = np.zeros(shape)
    if B is not None and ge_next is not None and lambda_f:
        fwd = lambda_f * (B @ ge_next)
    if ge_prev is not None and lambda_b:
        bwd = lambda_b * (A_prev @ ge_prev)
    return FlowTerm(fwd, bwd)


def r4(te_l: np.ndarray, flow_l: FlowTerm, psi=None) -> float:
    r = np.sum(te_l * flow_l.total, axis=0)
    return float(np.sum(r if psi is None else psi(r)))


@dataclass
class LevelContext:
    """Everything the objective at level ``l`` reads.

    ``G_prev`` is ``None`` at ``l = 1`` (the input carries no goal);
    ``B``, ``U_next``, ``G_next`` and ``A_next`` are ``None`` at ``l = L``.
    """

    level: int
    params: LevelParams
    A_prev: np.ndarray
    U_prev: np.ndarray
    U: np.ndarray
    G: np.ndarray
    Y: np.ndarray
    G_prev: np.ndarray | None = None
    U_next: np.ndarray | None = None
    G_next: np.ndarray | None = None
    B: np.ndarray | None = None
    A_next: np.ndarray | None = None
    tied: bool = True
    # multiplies every per-sample term (R1, R3, R4, A); 1/N turns sums into batch means
    sample_weight: float = 1.0
    # +1: alignment terms use te = Y - Q; -1: they use Q - Y
    orientation: int = 1

    @property
    def last(self) -> bool:
        return self.U_next is None

    @property
    def ge_prev(self) -> np.ndarray | None:
        return None if self.G_prev is None else self.U_prev - self.G_prev

    @property
    def ge_next(self) -> np.ndarray | None:
        return None if self.U_next is None else self.U_next - self.G_next

    @property
    def ge(self) -> np.ndarray:
        return self.U - self.G

    def Q(self) -> np.ndarray:
        return self.A_prev @ self.U_prev

    def te(self) -> np.ndarray:
        """Transform error as it enters the alignment terms (oriented)."""
        d = te(self.Q(), self.Y)
        return d if self.orientation == 1 else -d

    def flow(self) -> FlowTerm:
        p = self.params
        return flow(self.A_prev, self.B, self.ge_prev, self.ge_next, p.lambda_f, p.lambda_b, shape=self.U.shape)


def level_context(state: NodeState, weights: WeightSet, hp: HyperParams, l: int) -> LevelContext:
    L = state.L
    last = l == L
    return LevelContext(
        level=l,
        params=hp.level(l),
        A_prev=weights.A[l - 1],
        U_prev=state.U[l - 1],
        U=state.U[l],
        G=state.G[l],
        Y=state.Y[l],
        G_prev=state.G[l - 1] if l > 1 else None,
        U_next=None if last else state.U[l + 1],
        G_next=None if last else state.G[l + 1],
        B=weights.backward(l),
        A_next=None if last else weights.A[l],
        tied=weights.tied,
        sample_weight=1.0 / state.U[l].shape[1] if hp.sample_average else 1.0,
        orientation=hp.te_orientation,
    )


@dataclass(frozen=True)
class LevelTerms:
    r1: float
    r2: float
    r3: float
    r4: float
    sparsity: float

    @property
    def total(self) -> float:
        return self.r1 + self.r2 + self.r3 + self.r4 + self.sparsity


def level_terms(ctx: LevelContext) -> LevelTerms:
    p = ctx.params
    w = ctx.sample_weight
    Q = ctx.Q()
    te_l = ctx.te()
    return LevelTerms(
        r1=w * r1(ctx.A_prev, ctx.U_prev, ctx.Y, ctx.G, ctx.B, ctx.U_next),
        r2=r2(ctx.A_prev, p.lambda2, p.lambda3, p.lambda4,
              A_next=None if ctx.tied else ctx.A_next, B=ctx.B, lambda5=p.lambda5),
        r3=w * r3(Q, ctx.Y, ctx.G, ctx.U, orientation=ctx.orientation),
        r4=w * r4(te_l, ctx.flow()),
        sparsity=w * sparsity_term(ctx.U, ctx.Y, ctx.G, p.lambda1),
    )


def decoupled_objective(ctx: LevelContext) -> float:
    """``R1 + R2 + R3 + R4 + A`` at one level with all other variables fixed."""
    return level_terms(ctx).total


@dataclass
class ObjectiveBreakdown:
    levels: list[LevelTerms]

    @property
    def total(self) -> float:
        return float(sum(t.total for t in self.levels))

    def column(self, name: str) -> list[float]:
        return [getattr(t, name) for t in self.levels]


def total_objective(state: NodeState, weights: WeightSet, hp: HyperParams) -> ObjectiveBreakdown:
    return ObjectiveBreakdown(
        [level_terms(level_context(state, weights, hp, l)) for l in range(1, state.L + 1)]
    )

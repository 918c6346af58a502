"""Stage one (forward sNT pass, goal representations) and stage two
(per-level block updates of ``Y_l``, ``A_{l-1}`` and ``B_l``).

Stage two works on one level at a time against a read-only snapshot of the
weights. The parameter sets ``{Y_l, A_{l-1}, B_l}`` of different levels are
disjoint, so levels can be processed in any order or in parallel and give
bitwise-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .goal import GoalSolveSettings, solve_goal
from .objective import (
    LevelContext,
    LogDetError,
    decoupled_objective,
    level_context,
)
from .state import ClassMatrix, HyperParams, NodeState, WeightSet
from .transforms import assemble_correction, csnt, snt

ARMIJO_C = 1e-4
MAX_HALVINGS = 50


def forward(weights: WeightSet, taus, X: np.ndarray) -> tuple[list, list]:
    """sNT recursion ``U_l = snt(A_{l-1} U_{l-1}, tau_l)``; returns (Q, U) lists indexed 0..L."""
    U = [np.asarray(X, dtype=np.float64)]
    Q = [None]
    for l, (A, tau) in enumerate(zip(weights.A, taus), start=1):
        q = A @ U[l - 1]
        Q.append(q)
        U.append(snt(q, tau))
    return Q, U


def stage_one(
    data: ClassMatrix,
    weights: WeightSet,
    hp: HyperParams,
    goal_node: int,
    settings: GoalSolveSettings | None = None,
) -> NodeState:
    """Forward sNT pass plus the exact-goal representations at ``goal_node``.

    ``G`` is all-zero at every other level; ``Y`` starts equal to ``U``.
    """
    Q, U = forward(weights, hp.per_level("tau"), data.data)
    labels = data.labels
    G = [None] + [np.zeros_like(u) for u in U[1:]]
    G[goal_node] = solve_goal(Q[goal_node], labels, hp.level(goal_node).lambda1, settings)
    Y = [None] + [u.copy() for u in U[1:]]
    state = NodeState(U=U, Y=Y, G=G, Q=Q, labels=labels)
    state.refresh_deviations()
    return state


def update_y(q: np.ndarray, nu: np.ndarray, lam1: float) -> np.ndarray:
    """Minimizer of ``0.5||q - y||^2 + nu^T y + lam1 ||y||_1`` (a c-sNT)."""
    return csnt(q, nu, lam1)


def online_blend(A_prev: np.ndarray, A_hat: np.ndarray, rho: float) -> np.ndarray:
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0,1] (got {rho})")
    if rho == 1:
        return A_hat.copy()
    return A_prev - rho * (A_prev - A_hat)


@dataclass(frozen=True)
class QuadraticForm:
    """``0.5 tr(A gram A^T) - <A, cross>``; ``gram`` symmetric, not necessarily PSD."""

    gram: np.ndarray
    cross: np.ndarray

    def value(self, A: np.ndarray) -> float:
        return 0.5 * float(np.sum((A @ self.gram) * A)) - float(np.sum(A * self.cross))

    def gradient(self, A: np.ndarray) -> np.ndarray:
        return A @ self.gram - self.cross


class GramError(ValueError):
    pass


@dataclass(frozen=True)
class TargetPair:
    """Factor ``S`` of the symmetrized gram, target ``W`` and its pairing ``X``.

    The forward-weight problem is ``||A S||^2 - 2<A, W X^T> + V(A)``, i.e.
    the normal equations ``A (2 S S^T + lambda2 I) = 2 W X^T`` when the
    coherence and log-det weights are zero.
    """

    S: np.ndarray
    W: np.ndarray
    X: np.ndarray

    def form(self) -> QuadraticForm:
        """``||A S - W'||^2`` written as ``0.5 tr(A gram A^T) - <A, cross>`` (constant dropped)."""
        return QuadraticForm(2.0 * (self.S @ self.S.T), 2.0 * (self.W @ self.X.T))


def _psd_factor(M: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    sym = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise GramError(f"symmetrized gram has negative eigenvalue {w.min():.3e}")
    return V * np.sqrt(np.clip(w, 0.0, None))


def build_targets(U_prev, G_prev, U, G, U_next, G_next, Y, lambda_b, lambda_f) -> TargetPair:
    """Targets in the form ``S S^T = U_{l-1}(U_{l-1} + lambda_b ge_{l-1})^T``,
    ``W = Y_l - ge_l - lambda_f ge_{l+1}``.

    The gram is symmetrized and its small negative eigenvalues are clamped.
    ``G_prev``/``U_next`` may be ``None`` at the boundary levels.
    """
    ge_prev = 0.0 if G_prev is None else U_prev - G_prev
    M = U_prev @ (U_prev + lambda_b * ge_prev).T
    W = Y - (U - G)
    if U_next is not None and lambda_f:
        ge_next = U_next - G_next
        if ge_next.shape != W.shape:
            raise ValueError(f"ge_{{l+1}} shape {ge_next.shape} does not match W shape {W.shape}")
        W = W - lambda_f * ge_next
    return TargetPair(S=_psd_factor(M), W=W, X=U_prev)


def decoupled_forward_form(ctx: LevelContext) -> QuadraticForm:
    """The ``A_{l-1}``-dependent part of the level objective, without ``V``.

    Collecting the terms of ``R1 + R3 + R4`` that involve ``A = A_{l-1}``
    (``te = s (Y - A U_{l-1})`` with orientation ``s``, ``flow`` containing
    ``lambda_b A ge_{l-1}``)::

        gram  = 2 U_{l-1} U_{l-1}^T - s lambda_b (ge_{l-1} U_{l-1}^T + U_{l-1} ge_{l-1}^T)
        cross = (Y + G + s (ge_l + lambda_f B_l ge_{l+1})) U_{l-1}^T - s lambda_b Y ge_{l-1}^T
    """
    p = ctx.params
    sgn = ctx.orientation
    Up = ctx.U_prev
    gram = 2.0 * (Up @ Up.T)
    shift = ctx.ge
    if ctx.B is not None and p.lambda_f:
        shift = shift + p.lambda_f * (ctx.B @ ctx.ge_next)
    cross = (ctx.Y + ctx.G + sgn * shift) @ Up.T
    ge_prev = ctx.ge_prev
    if ge_prev is not None and p.lambda_b:
        cross = cross - sgn * p.lambda_b * (ctx.Y @ ge_prev.T)
        mixed = ge_prev @ Up.T
        gram = gram - sgn * p.lambda_b * (mixed + mixed.T)
    w = ctx.sample_weight
    return QuadraticForm(w * gram, w * cross)


class RidgeRequired(np.linalg.LinAlgError):
    pass


@dataclass
class _Eval:
    A: np.ndarray
    value: float
    AG: np.ndarray | None = None     # A @ gram
    coh: np.ndarray | None = None    # A A^T - I
    chol: tuple | None = None        # Cholesky factor of A^T A


class _ForwardProblem:
    """``f(A) = form(A) + V(A)`` with a Cholesky-based log-det.

    ``evaluate`` keeps the products the gradient needs, so a line search
    pays for each trial point once.
    """

    def __init__(self, form: QuadraticForm, lambda2, lambda3, lambda4):
        self.form = form
        self.l2, self.l3, self.l4 = lambda2, lambda3, lambda4

    def evaluate(self, A: np.ndarray) -> _Eval:
        AG = A @ self.form.gram
        val = 0.5 * float(np.sum(AG * A)) - float(np.sum(A * self.form.cross))
        val += 0.5 * self.l2 * float(np.sum(A * A))
        out = _Eval(A, np.inf, AG=AG)
        if self.l3:
            C = A @ A.T
            C[np.diag_indices_from(C)] -= 1.0
            val += 0.5 * self.l3 * float(np.sum(C * C))
            out.coh = C
        if self.l4:
            try:
                c = linalg.cho_factor(A.T @ A, check_finite=False)
            except linalg.LinAlgError:
                return out
            diag = np.abs(np.diag(c[0]))
            if diag.min() ** 2 < 1e-12 * max(1.0, float(diag.max()) ** 2):
                return out
            val -= self.l4 * 2.0 * float(np.sum(np.log(diag)))
            out.chol = c
        out.value = val if np.isfinite(val) else np.inf
        return out

    def value(self, A: np.ndarray) -> float:
        return self.evaluate(A).value

    def gradient(self, e: _Eval) -> np.ndarray:
        g = e.AG - self.form.cross + self.l2 * e.A
        if self.l3:
            g += 2.0 * self.l3 * (e.coh @ e.A)
        if self.l4:
            g -= 2.0 * self.l4 * linalg.cho_solve(e.chol, e.A.T, check_finite=False).T
        return g


def _gram_eigh(form: QuadraticForm):
    w, V = np.linalg.eigh(0.5 * (form.gram + form.gram.T))
    return np.clip(w, 0.0, None), V


def _closed_form_start(w: np.ndarray, V: np.ndarray, cross: np.ndarray, lambda2: float, lambda4: float):
    """Exact minimizer with the coherence term dropped and the gram clamped to PSD.

    ``w, V`` is the clamped eigendecomposition of the gram. With
    ``gram + lambda2 I = L L^T`` and ``Z = A L`` the problem becomes
    ``0.5||Z||^2 - <Z, cross L^{-T}> - lambda4 log det(Z^T Z)``, solved by
    rescaling the singular values ``s`` of ``cross L^{-T}`` to
    ``(s + sqrt(s^2 + 8 lambda4)) / 2``.
    """
    w = w + lambda2
    if w.min() <= 1e-12 * max(1.0, w.max()):
        return None
    # L = V diag(sqrt w); L^{-T} = V diag(1/sqrt w)
    Psi = (cross @ V) / np.sqrt(w)
    P, s, Rt = np.linalg.svd(Psi, full_matrices=False)
    z = 0.5 * (s + np.sqrt(s * s + 8.0 * lambda4))
    Z = (P * z) @ Rt
    return (Z / np.sqrt(w)) @ V.T


def update_forward_weight(
    form: QuadraticForm | TargetPair,
    A_prev: np.ndarray,
    lambda2: float,
    lambda3: float,
    lambda4: float,
    refine_steps: int = 10,
) -> np.ndarray:
    """Approximately minimize ``form(A) + V(A)``; never returns a worse point than ``A_prev``.

    With ``lambda3 = lambda4 = 0`` the minimizer is the ridge solution
    ``cross (gram + lambda2 I)^{-1}`` and is returned directly. Otherwise the
    closed-form start (coherence dropped) competes with ``A_prev`` and the
    better one is refined by right-preconditioned gradient steps with an
    Armijo backtracking line search.
    """
    if isinstance(form, TargetPair):
        form = form.form()
    n = A_prev.shape[1]
    if not lambda3 and not lambda4:
        H = form.gram + lambda2 * np.eye(n)
        try:
            c = linalg.cho_factor(0.5 * (H + H.T), check_finite=False)
        except linalg.LinAlgError as exc:
            raise RidgeRequired("ridge required: gram + lambda2 I is not positive definite") from exc
        return linalg.cho_solve(c, form.cross.T, check_finite=False).T

    problem = _ForwardProblem(form, lambda2, lambda3, lambda4)
    w, V = _gram_eigh(form)
    best = problem.evaluate(A_prev)
    start = _closed_form_start(w, V, form.cross, lambda2, lambda4)
    if start is not None:
        trial = problem.evaluate(start)
        if trial.value <= best.value:
            best = trial
    if refine_steps and np.isfinite(best.value):
        best = _refine(problem, best, refine_steps, w, V)
    return best.A.copy()


def _refine(problem: _ForwardProblem, cur: _Eval, steps: int, w: np.ndarray, V: np.ndarray) -> _Eval:
    # right preconditioner: clamped gram plus a shift bounding the curvature of V at the start
    s2 = np.linalg.eigvalsh(cur.A.T @ cur.A) if problem.l3 or problem.l4 else np.ones(1)
    shift = problem.l2 + 4.0 * problem.l3 * float(s2.max())
    if problem.l4:
        shift += 2.0 * problem.l4 / max(float(s2.min()), 1e-12)
    P = (V / (w + shift)) @ V.T
    step = 1.0
    g = problem.gradient(cur)
    for _ in range(steps):
        d = -(g @ P)
        slope = float(np.sum(g * d))
        if slope >= 0 or -slope <= 1e-15 * max(1.0, abs(cur.value)):
            break
        t = step
        for _ in range(MAX_HALVINGS):
            trial = problem.evaluate(cur.A + t * d)
            if trial.value <= cur.value + ARMIJO_C * t * slope:
                break
            t *= 0.5
        else:
            break
        g_new = problem.gradient(trial)
        # Barzilai-Borwein length in the preconditioned metric: t * <g, P g> / <d, g_new - g>
        curv = float(np.sum(d * (g_new - g)))
        step = min(t * -slope / curv, 1e3) if curv > 0 else min(2.0 * t, 1e3)
        cur, g = trial, g_new
    return cur


def update_backward_weight(
    Y: np.ndarray,
    U_next: np.ndarray,
    A_next: np.ndarray,
    ge_next: np.ndarray,
    te: np.ndarray,
    lambda5: float,
    lambda_f: float,
    U_prev: np.ndarray | None = None,
    sample_weight: float = 1.0,
) -> np.ndarray:
    """Closed-form minimizer of
    ``0.5||B U_{l+1} - Y||^2 + (lambda5/2)||B - A_l^T||^2 + lambda_f <te, B ge_{l+1}>``::

        B = (Y U_{l+1}^T + lambda5 A_l^T - lambda_f te ge_{l+1}^T)(U_{l+1} U_{l+1}^T + lambda5 I)^{-1}

    Passing ``U_prev`` swaps the gram for ``U_{l-1} U_{l-1}^T`` (the literal
    printed variant; only defined when ``M_{l-1} == M_{l+1}``).
    ``sample_weight`` scales the two data terms (``1/N`` for batch means).
    """
    w = sample_weight
    data = Y @ U_next.T
    if lambda_f:
        data = data - lambda_f * (te @ ge_next.T)
    rhs = w * data + lambda5 * A_next.T
    basis = U_next if U_prev is None else U_prev
    H = w * (basis @ basis.T) + lambda5 * np.eye(basis.shape[0])
    if H.shape[0] != rhs.shape[1]:
        raise ValueError(f"gram of shape {H.shape} does not match B with {rhs.shape[1]} columns")
    try:
        c = linalg.cho_factor(H, check_finite=False)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("backward gram is singular; lambda5 > 0 required") from exc
    return linalg.cho_solve(c, rhs.T, check_finite=False).T


def _objective_or_inf(ctx: LevelContext) -> float:
    try:
        return decoupled_objective(ctx)
    except LogDetError:
        return np.inf


@dataclass
class NodeUpdateResult:
    level: int
    Y: np.ndarray
    A_prev: np.ndarray
    B: np.ndarray | None
    objective: list[float] = field(default_factory=list)

    @property
    def objective_before(self) -> float:
        return self.objective[0]

    @property
    def objective_after(self) -> float:
        return self.objective[-1]


def stage_two_node(
    ctx: LevelContext,
    inner_rounds: int = 1,
    refine_steps: int = 10,
    forward_targets: str = "exact",
    literal_backward_gram: bool = False,
    descent_guard: bool = True,
) -> NodeUpdateResult:
    """Alternate exact Y, forward-weight and backward-weight updates at one level.

    ``ctx`` is copied; the caller's arrays are not modified. The decoupled
    objective is recorded before the first and after every sweep.
    """
    p = ctx.params
    ctx = LevelContext(**{k: getattr(ctx, k) for k in ctx.__dataclass_fields__})
    ctx.Y = ctx.Y.copy()
    update_b = not ctx.tied and not ctx.last
    trace = [_objective_or_inf(ctx)]
    for _ in range(inner_rounds):
        # (i) representations: exact minimizer over Y of the level objective.
        Q = ctx.Q()
        nu = ctx.orientation * assemble_correction(ctx.ge, ctx.flow().total).nu
        if ctx.last:
            ctx.Y = update_y(Q, nu, p.lambda1)
        else:
            # the backward fit 0.5||B U_{l+1} - Y||^2 doubles the quadratic:
            # same c-sNT at the averaged linear response, halved shift and threshold
            ctx.Y = update_y(0.5 * (Q + ctx.B @ ctx.U_next), 0.5 * nu, 0.5 * p.lambda1)

        # (ii) forward weight
        if forward_targets == "exact":
            form = decoupled_forward_form(ctx)
            ctx.A_prev = update_forward_weight(form, ctx.A_prev, p.lambda2, p.lambda3, p.lambda4, refine_steps)
        else:
            pair = build_targets(ctx.U_prev, ctx.G_prev, ctx.U, ctx.G, ctx.U_next, ctx.G_next,
                                 ctx.Y, p.lambda_b, p.lambda_f)
            form = pair.form()
            form = QuadraticForm(ctx.sample_weight * form.gram, ctx.sample_weight * form.cross)
            old = ctx.A_prev
            before = _objective_or_inf(ctx) if descent_guard else None
            ctx.A_prev = update_forward_weight(form, old, p.lambda2, p.lambda3, p.lambda4, refine_steps)
            # the target fit is not the level objective; optionally reject steps that increase it
            if descent_guard and not _objective_or_inf(ctx) <= before:
                ctx.A_prev = old

        # (iii) backward weight; in tied mode B_l = A_l^T stays at its snapshot value
        if update_b:
            ctx.B = update_backward_weight(
                ctx.Y, ctx.U_next, ctx.A_next, ctx.ge_next, ctx.te(),
                p.lambda5, p.lambda_f,
                U_prev=ctx.U_prev if literal_backward_gram else None,
                sample_weight=ctx.sample_weight,
            )
        trace.append(_objective_or_inf(ctx))
    return NodeUpdateResult(
        level=ctx.level,
        Y=ctx.Y,
        A_prev=ctx.A_prev,
        B=ctx.B if update_b else None,
        objective=trace,
    )


def stage_two(
    state: NodeState,
    weights: WeightSet,
    hp: HyperParams,
    levels=None,
    workers: int | None = None,
) -> dict[int, NodeUpdateResult]:
    """Run ``stage_two_node`` on each requested level against the same snapshot."""
    levels = list(range(1, state.L + 1)) if levels is None else list(levels)
    snapshot = weights.copy()

    def run(l):
        ctx = level_context(state, snapshot, hp, l)
        return stage_two_node(ctx, hp.inner_rounds, hp.refine_steps, hp.forward_targets,
                              hp.literal_backward_gram, hp.descent_guard)

    workers = hp.workers if workers is None else workers
    if workers > 1 and len(levels) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, levels))
    else:
        results = [run(l) for l in levels]
    return {r.level: r for r in results}


def apply_updates(
    weights: WeightSet,
    results: dict[int, NodeUpdateResult],
    rho: float,
    state: NodeState | None = None,
) -> WeightSet:
    """Blend each updated forward weight into ``weights``; backward weights are replaced."""
    new = weights.copy()
    for l, res in results.items():
        new.A[l - 1] = online_blend(weights.A[l - 1], res.A_prev, rho)
        if res.B is not None:
            new.B[l - 1] = res.B
        if state is not None:
            state.Y[l] = res.Y
    return new

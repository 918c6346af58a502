"""Outer training loop: class-stratified batches, schedule masks and the
synchronous / asynchronous orchestration of the two learning stages.

Asynchronous mode draws a Bernoulli mask ``phi`` per iteration. Levels with
``phi(l) = +1`` are read from the current weights in stage one and updated in
stage two; levels with ``phi(l) = -1`` are read from the shadow copy (the
weights as they were one iteration earlier) and left untouched. With
``p = 1`` every level is live and the run is the synchronous one: batches and
masks come from separate random streams, so the batch sequence does not
depend on the mode.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import checkpoint
from .evaluation import goal_probe
from .goal import GoalNotConverged, GoalSolveSettings
from .objective import LevelTerms, LogDetError, discrimination, level_context, level_terms
from .stages import apply_updates, stage_one, stage_two
from .state import (
    ClassMatrix,
    HyperParams,
    IterationRecord,
    NetworkConfig,
    NodeState,
    TrainReport,
    WeightSet,
    check,
    init_weights,
)

log = logging.getLogger(__name__)

METRICS_VERSION = "# lpn-metrics v1"


class NumericalFailure(ArithmeticError):
    """Training produced non-finite weights."""

    def __init__(self, iteration: int, level: int):
        super().__init__(f"non-finite forward weight at level {level} after iteration {iteration}")
        self.iteration = iteration
        self.level = level


@dataclass(frozen=True)
class ScheduleMask:
    phi: tuple[int, ...]
    iteration: int = 0

    def __post_init__(self):
        if any(v not in (-1, 1) for v in self.phi):
            raise ValueError(f"mask entries must be +-1 (got {self.phi})")

    def live(self, level: int) -> bool:
        return self.phi[level - 1] == 1

    @property
    def levels(self) -> list[int]:
        return [l for l in range(1, len(self.phi) + 1) if self.live(l)]


def draw_mask(L: int, p: float, rng: np.random.Generator, iteration: int = 0) -> ScheduleMask:
    if not 0 <= p <= 1:
        raise ValueError(f"p must be in [0,1] (got {p})")
    live = rng.random(L) < p
    return ScheduleMask(tuple(int(v) for v in np.where(live, 1, -1)), iteration)


def batch_size(K: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"batch fraction must be in (0,1] (got {fraction})")
    return min(K, math.ceil(fraction * K - 1e-9))


def epoch_batches(data: ClassMatrix, fraction: float, rng: np.random.Generator) -> list[ClassMatrix]:
    """One epoch: each class is permuted and cut into ``ceil(K / K_batch)`` batches.

    A short final batch is topped up with other samples of the same class,
    so every batch has ``K_batch`` distinct samples per class.
    """
    K = data.K
    kb = batch_size(K, fraction)
    n_batches = math.ceil(K / kb)
    orders = [rng.permutation(K) for _ in range(data.C)]
    batches = []
    for b in range(n_batches):
        cols = []
        for c, order in enumerate(orders):
            chosen = order[b * kb:(b + 1) * kb]
            if len(chosen) < kb:
                pool = np.setdiff1d(np.arange(K), chosen)
                extra = rng.choice(pool, size=kb - len(chosen), replace=False)
                chosen = np.concatenate([chosen, extra])
            cols.append(c * K + chosen)
        batches.append(ClassMatrix(data.data[:, np.concatenate(cols)], data.C, kb, data.classes))
    return batches


def batch_iter(data: ClassMatrix, fraction: float, rng: np.random.Generator) -> Iterator[ClassMatrix]:
    """Endless stream of class-stratified batches, epoch after epoch."""
    batch_size(data.K, fraction)
    while True:
        yield from epoch_batches(data, fraction, rng)


@dataclass
class TrainState:
    weights: WeightSet
    shadow_weights: WeightSet
    node_state: NodeState | None = None
    report: TrainReport = field(default_factory=TrainReport)
    iteration: int = 0


def _mixed_weights(current: WeightSet, shadow: WeightSet, mask: ScheduleMask) -> WeightSet:
    """Level ``l`` parameters from ``current`` when live, else from ``shadow``."""
    A = [current.A[l - 1] if mask.live(l) else shadow.A[l - 1] for l in range(1, current.L + 1)]
    B = None
    if current.B is not None:
        B = [current.B[l - 1] if mask.live(l) else shadow.B[l - 1] for l in range(1, current.L)]
    return WeightSet(A=A, B=B)


def _safe_terms(state: NodeState, weights: WeightSet, hp: HyperParams, l: int) -> LevelTerms:
    ctx = level_context(state, weights, hp, l)
    try:
        return level_terms(ctx)
    except LogDetError:
        # singular A^T A: report R2 as +inf, keep the other terms
        terms = level_terms(replace(ctx, params=replace(ctx.params, lambda4=0.0)))
        return LevelTerms(terms.r1, math.inf, terms.r3, terms.r4, terms.sparsity)


def _record(t, state, weights, hp, goal_node, mask, goal_failed, eps_hat, wall) -> IterationRecord:
    terms = [_safe_terms(state, weights, hp, l) for l in range(1, state.L + 1)]
    UL = state.U[-1]
    return IterationRecord(
        iteration=t,
        r1=[x.r1 for x in terms],
        r2=[x.r2 for x in terms],
        r3=[x.r3 for x in terms],
        r4=[x.r4 for x in terms],
        sparsity=[x.sparsity for x in terms],
        total=float(sum(x.total for x in terms)),
        goal_D=discrimination(state.G[goal_node], state.labels),
        sparsity_UL=float(np.mean(UL == 0)),
        mask=list(mask.phi),
        goal_failed=goal_failed,
        eps_hat=eps_hat,
        wall_time=wall,
    )


def train(
    config: NetworkConfig,
    hp: HyperParams,
    data: ClassMatrix,
    *,
    weights: WeightSet | None = None,
    goal_settings: GoalSolveSettings | None = None,
    probe: bool = False,
    checkpoint_dir=None,
    callback: Callable[[TrainState], None] | None = None,
) -> tuple[WeightSet, TrainReport]:
    """Run ``hp.max_iters`` outer iterations; see the module docstring for the modes."""
    check(config, hp)
    if data.data.shape[0] != config.input_dim:
        raise ValueError(f"data has {data.data.shape[0]} features, network expects {config.input_dim}")
    if data.C < 2:
        raise ValueError("training needs at least 2 classes")
    goal_settings = goal_settings or GoalSolveSettings(method=hp.goal_method)
    batch_seq, mask_seq = np.random.SeedSequence(hp.seed).spawn(2)
    batch_rng = np.random.default_rng(batch_seq)
    mask_rng = np.random.default_rng(mask_seq)
    weights = init_weights(config, hp) if weights is None else weights.copy()
    ts = TrainState(weights=weights, shadow_weights=weights.copy())
    batches = batch_iter(data, hp.batch_fraction, batch_rng)
    asynchronous = config.schedule_mode == "asynchronous"
    L = config.L
    lG = config.goal_node

    for t in range(1, hp.max_iters + 1):
        start = time.perf_counter()
        batch = next(batches)
        if asynchronous:
            mask = draw_mask(L, hp.async_p, mask_rng, t)
        else:
            mask = ScheduleMask((1,) * L, t)
        read = _mixed_weights(ts.weights, ts.shadow_weights, mask)
        goal_failed = False
        try:
            state = stage_one(batch, read, hp, lG, goal_settings)
        except GoalNotConverged as exc:
            log.warning("iteration %d: %s", t, exc)
            goal_failed = True
            state = None
        new = ts.weights
        if state is not None and mask.levels:
            results = stage_two(state, read, hp, levels=mask.levels)
            new = apply_updates(ts.weights, results, hp.rho, state)
            for l, a in enumerate(new.A, start=1):
                if not np.all(np.isfinite(a)):
                    raise NumericalFailure(t, l)
        ts.shadow_weights = ts.weights
        ts.weights = new
        ts.node_state = state
        ts.iteration = t
        if state is not None:
            eps = goal_probe(new, hp, batch, lG).normalized if probe else math.nan
            row = _record(t, state, new, hp, lG, mask, False, eps, time.perf_counter() - start)
        else:
            row = IterationRecord(t, [math.nan] * L, [math.nan] * L, [math.nan] * L, [math.nan] * L,
                                  [math.nan] * L, math.nan, math.nan, math.nan, list(mask.phi),
                                  goal_failed=True, wall_time=time.perf_counter() - start)
        ts.report.append(row)
        log.info("iter %d total=%.6g D=%.3g wall=%.2fs", t, row.total, row.goal_D, row.wall_time)
        if checkpoint_dir is not None and hp.checkpoint_every and t % hp.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            checkpoint.save(new, Path(checkpoint_dir) / f"ckpt_{t:05d}.lpnw")
        if callback is not None:
            callback(ts)
    return ts.weights, ts.report


def metrics_columns(L: int) -> list[str]:
    cols = ["iteration", "total", "goal_D", "sparsity_UL", "goal_failed", "eps_hat", "mask"]
    for name in ("r1", "r2", "r3", "r4", "sparsity"):
        cols += [f"{name}_{l}" for l in range(1, L + 1)]
    return cols


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(report: TrainReport, path, L: int) -> None:
    """CSV with one row per iteration; wall time is left out so reruns compare byte for byte."""
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_columns(L))
        for r in report.rows:
            row = [r.iteration, r.total, r.goal_D, r.sparsity_UL, r.goal_failed, r.eps_hat,
                   " ".join(str(v) for v in r.mask)]
            for name in ("r1", "r2", "r3", "r4", "sparsity"):
                row += getattr(r, name)
            w.writerow([_fmt(v) for v in row])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != METRICS_VERSION:
            raise ValueError(f"unexpected metrics header {first!r}")
        return list(csv.DictReader(fh))

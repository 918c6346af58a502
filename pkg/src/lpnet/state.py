"""Configuration, hyperparameters and mutable network state.

Levels are numbered 1..L. Level ``l`` owns the forward weight ``A_{l-1}``
(shape ``M_l x M_{l-1}``) and, for ``l < L``, the backward weight ``B_l``
(shape ``M_l x M_{l+1}``). Python lists are 0-based, so ``weights.A[l - 1]``
is ``A_{l-1}`` and ``weights.B[l - 1]`` is ``B_l``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

SCHEDULE_MODES = ("synchronous", "asynchronous")
PENALTY_KINDS = ("identity",)
FORWARD_TARGETS = ("exact", "targets")
INIT_SCALES = ("unit", "fan_in")
LEVEL_FIELDS = (
    "tau",
    "lambda0",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "lambda_f",
    "lambda_b",
)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of an L-node feed-forward transform network.

    ``dims`` lists the node widths ``M_1..M_L``; ``input_dim`` is ``M_0``.
    """

    L: int
    dims: tuple[int, ...]
    input_dim: int
    goal_node: int
    tie_backward: bool = True
    schedule_mode: str = "synchronous"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def width(self, level: int) -> int:
        """``M_level``; level 0 is the input."""
        return self.input_dim if level == 0 else self.dims[level - 1]

    def a_shape(self, level: int) -> tuple[int, int]:
        """Shape of ``A_{level-1}``."""
        return (self.width(level), self.width(level - 1))

    def b_shape(self, level: int) -> tuple[int, int]:
        """Shape of ``B_level``."""
        return (self.width(level), self.width(level + 1))


@dataclass(frozen=True)
class LevelParams:
    tau: float
    lambda0: float
    lambda1: float
    lambda2: float
    lambda3: float
    lambda4: float
    lambda5: float
    lambda_f: float
    lambda_b: float


@dataclass(frozen=True)
class HyperParams:
    """Per-level penalties plus the global training knobs.

    ``levels[l - 1]`` holds the parameters of node level ``l``.
    """

    levels: tuple[LevelParams, ...]
    rho: float = 0.8
    batch_fraction: float = 0.15
    max_iters: int = 120
    seed: int = 0
    penalty_kind: str = "identity"
    async_p: float = 0.5
    inner_rounds: int = 1
    refine_steps: int = 10
    forward_targets: str = "exact"
    descent_guard: bool = True
    sample_average: bool = True
    te_orientation: int = -1
    literal_backward_gram: bool = False
    goal_method: str = "assign"
    checkpoint_every: int = 0
    workers: int = 1
    init_scale: str = "unit"

    def level(self, l: int) -> LevelParams:
        return self.levels[l - 1]

    def per_level(self, name: str) -> list[float]:
        return [getattr(lp, name) for lp in self.levels]

    @classmethod
    def defaults(
        cls,
        config: NetworkConfig,
        *,
        lam: float = 34.0,
        lambda1: float | Sequence[float] | None = None,
        tau: float | Sequence[float] | None = None,
        lambda0: float = 1.0,
        lambda_f: float = 1.0,
        lambda_b: float = 1.0,
        **global_kw,
    ) -> "HyperParams":
        """Experiment defaults: every lambda_{l,2..5} = ``lam``, lambda_{l,fb} = 1.

        ``lambda1`` defaults to the level-dependent rule ``M_l / (2 l)``;
        ``tau`` defaults to ``lambda1``.
        """
        L = config.L
        lam1 = _broadcast(lambda1, L) if lambda1 is not None else [
            config.width(l) / (2.0 * l) for l in range(1, L + 1)
        ]
        taus = _broadcast(tau, L) if tau is not None else list(lam1)
        levels = tuple(
            LevelParams(
                tau=float(taus[i]),
                lambda0=float(lambda0),
                lambda1=float(lam1[i]),
                lambda2=float(lam),
                lambda3=float(lam),
                lambda4=float(lam),
                lambda5=float(lam),
                lambda_f=float(lambda_f),
                lambda_b=float(lambda_b),
            )
            for i in range(L)
        )
        return cls(levels=levels, **global_kw)

    def with_level_values(self, name: str, value) -> "HyperParams":
        """Return a copy with one per-level field replaced (scalar or per-level list)."""
        vals = _broadcast(value, len(self.levels))
        levels = tuple(replace(lp, **{name: float(v)}) for lp, v in zip(self.levels, vals))
        return replace(self, levels=levels)

    def override(self, name: str, value) -> "HyperParams":
        """Set either a per-level field (broadcast) or a global field by name."""
        if name in LEVEL_FIELDS:
            return self.with_level_values(name, value)
        kinds = {f.name: f.type for f in fields(self) if f.name != "levels"}
        if name not in kinds:
            raise KeyError(f"unknown hyperparameter {name!r}")
        current = getattr(self, name)
        if isinstance(current, bool):
            value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        return replace(self, **{name: value})

    def to_dict(self) -> dict:
        out = {name: self.per_level(name) for name in LEVEL_FIELDS}
        for f in fields(self):
            if f.name != "levels":
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, config: NetworkConfig, data: dict) -> "HyperParams":
        """Defaults plus overrides. ``lam``, ``lambda1`` and ``tau`` go through
        ``defaults`` so that an unset ``tau`` follows ``lambda1``."""
        data = dict(data)
        base = {k: data.pop(k) for k in ("lam", "lambda1", "tau") if k in data}
        if "lam" in base and not np.isscalar(base["lam"]):
            raise ValueError("lam must be a scalar")
        hp = cls.defaults(config, **base)
        for key, value in data.items():
            hp = hp.override(key, value)
        return hp


def _broadcast(value, n: int) -> list[float]:
    if np.isscalar(value):
        return [float(value)] * n
    vals = [float(v) for v in value]
    if len(vals) != n:
        raise ValueError(f"expected {n} per-level values, got {len(vals)}")
    return vals


def validate(config: NetworkConfig, hp: HyperParams) -> list[str]:
    """Collect every shape/range violation; an empty list means valid."""
    errors = []
    if config.L < 2:
        errors.append(f"L must be >= 2 (got {config.L})")
    if len(config.dims) != config.L:
        errors.append(f"dims must list L={config.L} widths (got {len(config.dims)})")
    if config.input_dim < 1:
        errors.append(f"input_dim must be >= 1 (got {config.input_dim})")
    for i, d in enumerate(config.dims, start=1):
        if d < 1:
            errors.append(f"dims[{i}] must be >= 1 (got {d})")
    if not 1 <= config.goal_node <= config.L:
        errors.append(f"goal_node out of range: need 1 <= goal_node <= {config.L} (got {config.goal_node})")
    if config.schedule_mode not in SCHEDULE_MODES:
        errors.append(f"schedule_mode must be one of {SCHEDULE_MODES} (got {config.schedule_mode!r})")

    if len(hp.levels) != config.L:
        errors.append(f"hyperparameters given for {len(hp.levels)} levels, need {config.L}")
    for l, lp in enumerate(hp.levels, start=1):
        for name in LEVEL_FIELDS:
            v = getattr(lp, name)
            if not np.isfinite(v) or v < 0:
                errors.append(f"{name}[{l}] must be finite and >= 0 (got {v})")
    # log|det A^T A| needs full column rank, i.e. M_l >= M_{l-1}
    if len(config.dims) == config.L and len(hp.levels) == config.L:
        for l in range(1, config.L + 1):
            if hp.level(l).lambda4 > 0 and config.width(l) < config.width(l - 1):
                errors.append(
                    f"lambda4[{l}] > 0 requires M_{l} >= M_{l - 1} (got {config.width(l)} < {config.width(l - 1)})"
                )
    if not 0 < hp.rho <= 1:
        errors.append(f"rho must be in (0,1] (got {hp.rho})")
    if not 0 < hp.batch_fraction <= 1:
        errors.append(f"batch_fraction must be in (0,1] (got {hp.batch_fraction})")
    if hp.max_iters < 0:
        errors.append(f"max_iters must be >= 0 (got {hp.max_iters})")
    if hp.penalty_kind not in PENALTY_KINDS:
        errors.append(f"penalty_kind must be one of {PENALTY_KINDS} (got {hp.penalty_kind!r})")
    if not 0 <= hp.async_p <= 1:
        errors.append(f"async_p must be in [0,1] (got {hp.async_p})")
    if hp.inner_rounds < 0:
        errors.append(f"inner_rounds must be >= 0 (got {hp.inner_rounds})")
    if hp.refine_steps < 0:
        errors.append(f"refine_steps must be >= 0 (got {hp.refine_steps})")
    if hp.forward_targets not in FORWARD_TARGETS:
        errors.append(f"forward_targets must be one of {FORWARD_TARGETS} (got {hp.forward_targets!r})")
    if hp.goal_method not in ("assign", "penalty"):
        errors.append(f"goal_method must be 'assign' or 'penalty' (got {hp.goal_method!r})")
    if hp.te_orientation not in (1, -1):
        errors.append(f"te_orientation must be +1 or -1 (got {hp.te_orientation})")
    if hp.init_scale not in INIT_SCALES:
        errors.append(f"init_scale must be one of {INIT_SCALES} (got {hp.init_scale!r})")
    if hp.workers < 1:
        errors.append(f"workers must be >= 1 (got {hp.workers})")
    return errors


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def check(config: NetworkConfig, hp: HyperParams) -> None:
    errors = validate(config, hp)
    if errors:
        raise ConfigError(errors)


@dataclass
class WeightSet:
    """Forward weights ``A_0..A_{L-1}`` and backward weights ``B_1..B_{L-1}``.

    ``B`` is ``None`` in tied mode, where ``B_l`` reads as ``A_l^T``.
    """

    A: list[np.ndarray]
    B: list[np.ndarray] | None = None

    @property
    def L(self) -> int:
        return len(self.A)

    @property
    def tied(self) -> bool:
        return self.B is None

    def backward(self, l: int) -> np.ndarray | None:
        """``B_l`` for ``1 <= l < L``; ``None`` at the last level."""
        if l >= self.L:
            return None
        if self.B is None:
            return self.A[l].T
        return self.B[l - 1]

    def copy(self) -> "WeightSet":
        return WeightSet(
            A=[a.copy() for a in self.A],
            B=None if self.B is None else [b.copy() for b in self.B],
        )

    def equals(self, other: "WeightSet") -> bool:
        """Bitwise equality."""
        if self.L != other.L or self.tied != other.tied:
            return False
        pairs = list(zip(self.A, other.A))
        if self.B is not None:
            pairs += list(zip(self.B, other.B))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


def init_weights(config: NetworkConfig, hp: HyperParams | None = None, seed: int | None = None) -> WeightSet:
    """I.i.d. Gaussian weights from a seeded generator.

    Entries are standard normal; with ``hp.init_scale == "fan_in"`` each
    matrix is divided by the square root of its column count, so a unit
    variance input keeps roughly unit variance after the linear map.
    """
    if seed is None:
        seed = hp.seed if hp is not None else 0
    fan_in = hp is not None and hp.init_scale == "fan_in"
    rng = np.random.default_rng(seed)

    def draw(shape):
        m = rng.standard_normal(shape)
        return m / np.sqrt(shape[1]) if fan_in else m

    A = [draw(config.a_shape(l)) for l in range(1, config.L + 1)]
    B = None
    if not config.tie_backward:
        B = [draw(config.b_shape(l)) for l in range(1, config.L)]
    return WeightSet(A=A, B=B)


@dataclass
class ClassMatrix:
    """Samples laid out class-major: column ``c*K + k`` is sample k of class c (0-based)."""

    data: np.ndarray
    C: int
    K: int
    classes: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.C * self.K:
            raise ValueError(f"expected {self.C * self.K} columns, got shape {self.data.shape}")
        if self.classes is None:
            self.classes = np.arange(self.C)

    @property
    def labels(self) -> np.ndarray:
        """Class index (0..C-1) of every column."""
        return np.repeat(np.arange(self.C), self.K)

    @staticmethod
    def index(c: int, k: int, K: int) -> int:
        return c * K + k

    def column(self, c: int, k: int) -> np.ndarray:
        return self.data[:, self.index(c, k, self.K)]

    def class_block(self, c: int) -> np.ndarray:
        return self.data[:, c * self.K:(c + 1) * self.K]

    def relabel(self, perm: Sequence[int]) -> "ClassMatrix":
        """New class ``i`` is old class ``perm[i]``; only the column blocks move."""
        perm = list(perm)
        blocks = [self.class_block(c) for c in perm]
        return ClassMatrix(np.hstack(blocks), self.C, self.K, np.asarray(self.classes)[perm])


@dataclass
class NodeState:
    """Per-level representations produced by stage one and refined by stage two.

    Lists are indexed by level 0..L; index 0 holds the input in ``U`` and
    ``None`` elsewhere.
    """

    U: list[np.ndarray | None]
    Y: list[np.ndarray | None]
    G: list[np.ndarray | None]
    Q: list[np.ndarray | None]
    labels: np.ndarray
    te: list[np.ndarray | None] = field(default_factory=list)
    ge: list[np.ndarray | None] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.U) - 1

    def refresh_deviations(self) -> None:
        """Recompute cached te = Y - Q and ge = U - G at every level."""
        self.te = [None] + [self.Y[l] - self.Q[l] for l in range(1, self.L + 1)]
        self.ge = [None] + [self.U[l] - self.G[l] for l in range(1, self.L + 1)]

    def copy(self) -> "NodeState":
        return copy.deepcopy(self)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"labels": self.labels}
        for name in ("U", "Y", "G", "Q", "te", "ge"):
            for l, arr in enumerate(getattr(self, name)):
                if arr is not None:
                    out[f"{name}_{l}"] = arr
        return out

    def save(self, path) -> None:
        np.savez(path, **self.arrays())

    @classmethod
    def load(cls, path) -> "NodeState":
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
        L = max(int(k.split("_")[1]) for k in data if k.startswith("U_"))
        lists = {
            name: [data.get(f"{name}_{l}") for l in range(L + 1)]
            for name in ("U", "Y", "G", "Q", "te", "ge")
        }
        return cls(labels=data["labels"], **lists)


@dataclass
class IterationRecord:
    iteration: int
    r1: list[float]
    r2: list[float]
    r3: list[float]
    r4: list[float]
    sparsity: list[float]
    total: float
    goal_D: float
    sparsity_UL: float
    mask: list[int]
    goal_failed: bool = False
    eps_hat: float = float("nan")
    wall_time: float = 0.0


@dataclass
class TrainReport:
    rows: list[IterationRecord] = field(default_factory=list)
    goal_failures: int = 0

    def append(self, row: IterationRecord) -> None:
        self.rows.append(row)
        if row.goal_failed:
            self.goal_failures += 1

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.rows])

    def deterministic_rows(self) -> list[tuple]:
        """Every recorded field except wall time."""
        return [
            tuple(
                tuple(v) if isinstance(v, list) else v
                for k, v in vars(r).items()
                if k != "wall_time"
            )
            for r in self.rows
        ]

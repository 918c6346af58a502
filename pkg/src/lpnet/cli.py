"""Command line entry point: ``lpnet {train,eval,inspect,reproduce-tables}``.

Exit codes: 0 ok, 2 bad input, 3 corrupt checkpoint, 4 numerical failure.

A run is described by a YAML or JSON config with three sections::

    network: {nodes: 4, dims: 784, goal_node: 4, tie_backward: true, mode: syn}
    data:    {kind: idx, train_images: ..., train_labels: ...,
              test_images: ..., test_labels: ..., per_class: 100,
              test_per_class: 100, normalize: sample, center: false}
    hp:      {tau: 0.3, lambda1: 0.3, rho: 0.8, ...}

``data.kind: synthetic`` draws Gaussian classes instead
(``dim, classes, per_class, test_per_class, separation, seed``).
Command line flags override the file; ``--hp.NAME=VALUE`` sets any
hyperparameter field.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .data import IdxFormatError, gaussian_classes, load_idx, normalize_unit_variance, to_class_matrix
from .evaluation import accuracy, embed, fit_linear, goal_probe
from .objective import LogDetError, log_abs_det_gram
from .scheduler import NumericalFailure, train, write_metrics
from .stages import GramError, forward
from .state import ClassMatrix, ConfigError, HyperParams, NetworkConfig, WeightSet, check, init_weights

log = logging.getLogger("lpnet")

EXIT_OK, EXIT_INPUT, EXIT_CORRUPT, EXIT_NUMERIC = 0, 2, 3, 4
MODES = {"syn": "synchronous", "asyn": "asynchronous"}
TAG_RE = re.compile(r"^(syn|asyn)_n\[(\d+)\]g\[(\d+)\]$")


class InputError(ValueError):
    pass


def mode_tag(config: NetworkConfig) -> str:
    short = "syn" if config.schedule_mode == "synchronous" else "asyn"
    return f"{short}_n[{config.L}]g[{config.goal_node}]"


def parse_tag(tag: str) -> tuple[str, int, int]:
    """``asyn_n[6]g[3]`` -> ("asyn", 6, 3)."""
    m = TAG_RE.match(tag)
    if not m:
        raise InputError(f"bad mode tag {tag!r}; expected e.g. syn_n[4]g[4]")
    return m.group(1), int(m.group(2)), int(m.group(3))


@dataclass
class RunManifest:
    network: dict
    data: dict
    hp: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    config_path: str | None = None
    out: str | None = None

    @property
    def tag(self) -> str:
        return f"{self.network.get('mode', 'syn')}_n[{self.network['nodes']}]g[{self.network['goal_node']}]"

    def to_dict(self) -> dict:
        return {"network": self.network, "data": self.data, "hp": self.hp, "eval": self.eval}


def _read_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise InputError(f"cannot parse {p}: {exc}") from None
    if not isinstance(raw, dict):
        raise InputError(f"{p}: expected a mapping at top level")
    unknown = set(raw) - {"network", "data", "hp", "eval"}
    if unknown:
        raise InputError(f"{p}: unknown sections {sorted(unknown)}")
    return raw


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _hp_overrides(extra: list[str]) -> dict:
    """``--hp.rho=0.8`` or ``--hp.rho 0.8`` pairs from unparsed argv."""
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--hp."):
            raise InputError(f"unrecognized argument {arg!r}")
        name, eq, value = arg[5:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise InputError(f"missing value for {arg}")
            value = extra[i + 1]
            i += 1
        if not name:
            raise InputError(f"empty hyperparameter name in {arg!r}")
        out[name] = _parse_value(value)
        i += 1
    return out


def build_manifest(args, extra: list[str]) -> RunManifest:
    raw = _read_config(args.config) if args.config else {}
    network = dict(raw.get("network") or {})
    data = dict(raw.get("data") or {})
    hp = dict(raw.get("hp") or {})
    ev = dict(raw.get("eval") or {})
    if getattr(args, "tag", None):
        mode, nodes, goal = parse_tag(args.tag)
        network.update(mode=mode, nodes=nodes, goal_node=goal)
    for flag, key in (("mode", "mode"), ("nodes", "nodes"), ("goal_node", "goal_node")):
        v = getattr(args, flag, None)
        if v is not None:
            network[key] = v
    for flag in ("seed", "batch_fraction", "rho"):
        v = getattr(args, flag, None)
        if v is not None:
            hp[flag] = v
    if getattr(args, "iters", None) is not None:
        hp["max_iters"] = args.iters
    hp.update(_hp_overrides(extra))
    network.setdefault("mode", "syn")
    if network["mode"] not in MODES:
        raise InputError(f"network.mode must be syn or asyn (got {network['mode']!r})")
    for key in ("nodes", "goal_node"):
        if key not in network:
            raise InputError(f"network.{key} is required")
    if not data:
        raise InputError("a data section is required")
    return RunManifest(network, data, hp, ev, args.config, getattr(args, "out", None))


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"dataset file not found: {p}")
    return p


def load_data(section: dict) -> tuple[ClassMatrix, ClassMatrix | None, str]:
    """Train and (optional) test class matrices plus a dataset label."""
    kind = section.get("kind", "idx")
    if kind == "synthetic":
        M, C = int(section.get("dim", 16)), int(section.get("classes", 2))
        K, Kt = int(section.get("per_class", 50)), int(section.get("test_per_class", 0))
        ds = gaussian_classes(M, C, K + Kt, float(section.get("separation", 1.0)), int(section.get("seed", 0)))
        first = np.concatenate([np.arange(c * (K + Kt), c * (K + Kt) + K) for c in range(C)])
        train_ds = ds.subset(first)
        test_ds = ds.subset(np.setdiff1d(np.arange(ds.labels.size), first)) if Kt else None
        name = f"synthetic(M={M},C={C},K={K})"
    elif kind == "idx":
        for key in ("train_images", "train_labels"):
            if key not in section:
                raise InputError(f"data.{key} is required")
        train_ds = load_idx(_require_file(section["train_images"]), _require_file(section["train_labels"]))
        test_ds = None
        if section.get("test_images"):
            test_ds = load_idx(_require_file(section["test_images"]), _require_file(section["test_labels"]))
        K = int(section.get("per_class", min(train_ds.class_counts.values())))
        Kt = int(section.get("test_per_class", min(test_ds.class_counts.values()) if test_ds else 0))
        name = section.get("name", Path(section["train_images"]).name)
    else:
        raise InputError(f"data.kind must be idx or synthetic (got {kind!r})")

    norm = section.get("normalize", "sample" if kind == "idx" else "none")

    def prep(ds, per_class):
        if norm != "none":
            ds = normalize_unit_variance(ds, center=bool(section.get("center", False)), per=norm)
        return to_class_matrix(ds, per_class)

    train_cm = prep(train_ds, K)
    test_cm = prep(test_ds, Kt) if test_ds is not None and Kt else None
    return train_cm, test_cm, name


def resolve(manifest: RunManifest, input_dim: int) -> tuple[NetworkConfig, HyperParams]:
    net = manifest.network
    L = int(net["nodes"])
    dims = net.get("dims", input_dim)
    dims = [int(dims)] * L if np.isscalar(dims) else [int(d) for d in dims]
    config = NetworkConfig(
        L=L,
        dims=tuple(dims),
        input_dim=input_dim,
        goal_node=int(net["goal_node"]),
        tie_backward=bool(net.get("tie_backward", True)),
        schedule_mode=MODES[net["mode"]],
    )
    if len(dims) != L:
        raise ConfigError([f"dims must list {L} widths (got {len(dims)})"])
    try:
        hp = HyperParams.from_dict(config, manifest.hp)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from None
    check(config, hp)
    return config, hp


def evaluate(weights: WeightSet, hp: HyperParams, config: NetworkConfig, train_cm: ClassMatrix,
             test_cm: ClassMatrix | None, ev: dict) -> dict:
    clf = fit_linear(embed(weights, hp, train_cm), train_cm.labels,
                     reg=float(ev.get("reg", 1e-3)), epochs=int(ev.get("epochs", 200)))
    out = {"train_accuracy": accuracy(clf, embed(weights, hp, train_cm), train_cm.labels)}
    if test_cm is not None:
        out["accuracy"] = accuracy(clf, embed(weights, hp, test_cm), test_cm.labels)
    else:
        out["accuracy"] = out["train_accuracy"]
    out["eps_hat"] = goal_probe(weights, hp, train_cm, config.goal_node).normalized
    return out


def _run(manifest: RunManifest, out_dir: Path) -> dict:
    train_cm, test_cm, name = load_data(manifest.data)
    config, hp = resolve(manifest, train_cm.data.shape[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(
        {**manifest.to_dict(), "resolved_hp": hp.to_dict()}, indent=2, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    weights, report = train(config, hp, train_cm, weights=init_weights(config, hp),
                            checkpoint_dir=out_dir / "checkpoints" if hp.checkpoint_every else None)
    t1 = time.perf_counter()
    checkpoint.save(weights, out_dir / "weights.lpnw")
    write_metrics(report, out_dir / "metrics.csv", config.L)
    scores = evaluate(weights, hp, config, train_cm, test_cm, manifest.eval)
    result = {
        "dataset": name,
        "mode": mode_tag(config),
        "nodes": config.L,
        "goal_node": config.goal_node,
        "accuracy": scores["accuracy"],
        "train_accuracy": scores["train_accuracy"],
        "eps_hat": scores["eps_hat"],
        "timings": {"train_s": t1 - t0, "eval_s": time.perf_counter() - t1,
                    "per_iter_s": (t1 - t0) / max(hp.max_iters, 1)},
    }
    (out_dir / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def cmd_train(args, extra) -> int:
    manifest = build_manifest(args, extra)
    if not args.out:
        raise InputError("--out is required")
    result = _run(manifest, Path(args.out))
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _sidecar(ckpt: Path, config) -> dict:
    path = Path(config) if config else ckpt.parent / "config.json"
    if not path.is_file():
        raise InputError(f"config not found: {path} (pass --config)")
    return _read_config_any(path)


def _read_config_any(path: Path) -> dict:
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise InputError(f"{path}: expected a mapping at top level")
    raw.pop("resolved_hp", None)
    return raw


def _load_checkpoint(path) -> WeightSet:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    return checkpoint.load(p)


def _manifest_from(raw: dict) -> RunManifest:
    return RunManifest(dict(raw.get("network") or {}), dict(raw.get("data") or {}),
                       dict(raw.get("hp") or {}), dict(raw.get("eval") or {}))


def cmd_eval(args, extra) -> int:
    weights = _load_checkpoint(args.checkpoint)
    manifest = _manifest_from(_sidecar(Path(args.checkpoint), args.config))
    if args.data:
        manifest.data = dict(_read_config_any(Path(args.data)).get("data") or {})
    train_cm, test_cm, name = load_data(manifest.data)
    config, hp = resolve(manifest, train_cm.data.shape[0])
    _check_shapes(weights, config)
    scores = evaluate(weights, hp, config, train_cm, test_cm, manifest.eval)
    print(json.dumps({"dataset": name, "mode": mode_tag(config), "nodes": config.L,
                      "goal_node": config.goal_node, **scores}, indent=2))
    return EXIT_OK


def _check_shapes(weights: WeightSet, config: NetworkConfig) -> None:
    if weights.L != config.L:
        raise InputError(f"checkpoint has {weights.L} levels, config has {config.L}")
    for l in range(1, config.L + 1):
        if weights.A[l - 1].shape != config.a_shape(l):
            raise InputError(f"A_{l - 1} has shape {weights.A[l - 1].shape}, config expects {config.a_shape(l)}")


def weight_report(weights: WeightSet, taus=None, probe: np.ndarray | None = None) -> list[dict]:
    """Per-level quantities the weight penalty acts on."""
    rows = []
    U = None
    if probe is not None and taus is not None:
        _, U = forward(weights, taus, probe)
    for l, A in enumerate(weights.A, start=1):
        try:
            logdet = log_abs_det_gram(A)
        except LogDetError:
            logdet = None
        row = {
            "level": l,
            "shape": list(A.shape),
            "fro_norm": float(np.linalg.norm(A)),
            "coherence": float(np.linalg.norm(A @ A.T - np.eye(A.shape[0]))),
            "log_det_gram": logdet,
            "probe_sparsity": None if U is None else float(np.mean(U[l] == 0)),
        }
        if not weights.tied and l < weights.L:
            row["backward_fro_norm"] = float(np.linalg.norm(weights.B[l - 1]))
        rows.append(row)
    return rows


def cmd_inspect(args, extra) -> int:
    weights = _load_checkpoint(args.checkpoint)
    taus, probe = None, None
    path = Path(args.config) if args.config else Path(args.checkpoint).parent / "config.json"
    if path.is_file():
        manifest = _manifest_from(_read_config_any(path))
        train_cm, _, _ = load_data(manifest.data)
        config, hp = resolve(manifest, train_cm.data.shape[0])
        _check_shapes(weights, config)
        taus = hp.per_level("tau")
        n = min(train_cm.data.shape[1], args.probe_size)
        probe = train_cm.data[:, np.linspace(0, train_cm.data.shape[1] - 1, n).astype(int)]
    print(json.dumps({"levels": weight_report(weights, taus, probe)}, indent=2))
    return EXIT_OK


def cmd_reproduce_tables(args, extra) -> int:
    """Train one network per mode tag and tabulate test accuracy."""
    base = build_manifest(args, extra)
    out = Path(args.out or "tables")
    rows = []
    for tag in args.tags:
        mode, nodes, goal = parse_tag(tag)
        m = RunManifest({**base.network, "mode": mode, "nodes": nodes, "goal_node": goal},
                        base.data, dict(base.hp), base.eval)
        log.info("running %s", tag)
        rows.append(_run(m, out / tag.replace("[", "").replace("]", "")))
    lines = ["| network | dataset | accuracy (%) | train s |", "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['mode']} | {r['dataset']} | {100 * r['accuracy']:.2f} | {r['timings']['train_s']:.0f} |")
    table = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(table)
    (out / "table.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table, end="")
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--nodes", type=int)
    p.add_argument("--goal-node", dest="goal_node", type=int)
    p.add_argument("--batch-fraction", dest="batch_fraction", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and evaluate it")
    _common(p)
    p.add_argument("--tag", help="mode tag such as syn_n[4]g[4]; sets mode, nodes and goal node")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fit the linear head on a checkpoint and report accuracy")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="run config (defaults to config.json next to the checkpoint)")
    p.add_argument("--data", help="config file whose data section replaces the run's")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print per-level weight statistics")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="run config used for the probe batch")
    p.add_argument("--probe-size", dest="probe_size", type=int, default=100)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("reproduce-tables", help="train one network per mode tag and tabulate accuracy")
    _common(p)
    p.add_argument("--tags", nargs="+", default=["syn_n[4]g[4]", "asyn_n[4]g[4]"])
    p.set_defaults(func=cmd_reproduce_tables)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command in ("eval", "inspect"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except checkpoint.CorruptCheckpoint as exc:
        print(f"error: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (NumericalFailure, LogDetError, GramError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, IdxFormatError, ValueError, KeyError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

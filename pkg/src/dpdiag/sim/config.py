"""Scenario configuration: dataclasses, validation and the YAML file format.

A scenario file is a YAML mapping::

    schema_version: 1
    name: s1-1
    world_size: 8
    steps: 500
    batch_size_per_worker: 16
    base_seed: 1234
    seed_policy: strict          # strict | rank0_differs | per_rank
    alt_seed: 4321               # only read for rank0_differs
    sharding_mode: disjoint_shards   # or replicated_data
    capture: full                # full | sketch | norm
    sketch_k: 1024
    sketch_seed: 0
    data: {n_samples: 4096, input_dim: 8, n_classes: 4, class_sep: 1.0, seed: 7}
    model: {hidden: [16], activation: tanh}
    optimizer: {lr: 0.1, momentum: 0.0}
    injectors:
      - {kind: grad_noise, sigma: 0.02}
      - {kind: bf16_quantize, targets: [gradients]}

Every key is optional except ``schema_version``; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import re

import yaml

SCHEMA_VERSION = 1


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` (no dot, no sign) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)

SEED_POLICIES = ("strict", "rank0_differs", "per_rank")
SHARDING_MODES = ("disjoint_shards", "replicated_data")
CAPTURE_MODES = ("full", "sketch", "norm")
ACTIVATIONS = ("tanh", "relu", "identity")
INJECTOR_KINDS = ("grad_noise", "bf16_quantize")
BF16_TARGETS = ("gradients", "activations")

_U64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field path and line."""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path:
            where += f"field '{path}'"
        if line is not None:
            where += f"{' ' if where else ''}(line {line})"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class DataSpec:
    n_samples: int = 4096
    input_dim: int = 8
    n_classes: int = 4
    class_sep: float = 1.0
    seed: int = 7


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"


@dataclass(frozen=True)
class OptimizerSpec:
    lr: float = 0.1
    momentum: float = 0.0


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    sigma: float = 0.0
    targets: tuple[str, ...] = ("gradients",)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    world_size: int = 8
    steps: int = 200
    batch_size_per_worker: int = 16
    base_seed: int = 1234
    seed_policy: str = "strict"
    alt_seed: int = 4321
    sharding_mode: str = "disjoint_shards"
    capture: str = "full"
    sketch_k: int = 1024
    sketch_seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    injectors: tuple[PerturbationSpec, ...] = ()

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "injectors":
                value = [_injector_dict(p) for p in value]
            elif dataclasses.is_dataclass(value):
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(value).items()}
            out[f.name] = value
        return out

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _injector_dict(p: PerturbationSpec) -> dict[str, Any]:
    if p.kind == "grad_noise":
        return {"kind": p.kind, "sigma": p.sigma}
    return {"kind": p.kind, "targets": list(p.targets)}


def _check(cond: bool, message: str, path: str):
    if not cond:
        raise ConfigError(message, path)


def validate(cfg: ScenarioConfig) -> None:
    _check(cfg.world_size >= 1, "must be >= 1", "world_size")
    _check(cfg.steps >= 0, "must be >= 0", "steps")
    _check(cfg.batch_size_per_worker >= 1, "must be >= 1", "batch_size_per_worker")
    for name in ("base_seed", "alt_seed", "sketch_seed"):
        v = getattr(cfg, name)
        _check(0 <= v <= _U64, "must be an unsigned 64-bit integer", name)
    _check(cfg.base_seed + cfg.world_size <= _U64, "base_seed + world_size overflows 64 bits", "base_seed")
    _check(cfg.seed_policy in SEED_POLICIES, f"must be one of {SEED_POLICIES}", "seed_policy")
    _check(cfg.sharding_mode in SHARDING_MODES, f"must be one of {SHARDING_MODES}", "sharding_mode")
    _check(cfg.capture in CAPTURE_MODES, f"must be one of {CAPTURE_MODES}", "capture")
    _check(cfg.sketch_k >= 1, "must be >= 1", "sketch_k")

    d = cfg.data
    _check(d.n_classes >= 2, "must be >= 2", "data.n_classes")
    _check(d.n_samples >= 1, "must be >= 1", "data.n_samples")
    _check(d.n_samples >= d.n_classes, "must be >= n_classes", "data.n_samples")
    _check(d.input_dim >= 1, "must be >= 1", "data.input_dim")
    _check(d.class_sep >= 0, "must be >= 0", "data.class_sep")
    _check(0 <= d.seed <= _U64, "must be an unsigned 64-bit integer", "data.seed")
    if cfg.sharding_mode == "disjoint_shards":
        _check(
            cfg.batch_size_per_worker * cfg.world_size <= d.n_samples,
            "batch_size_per_worker * world_size exceeds n_samples",
            "batch_size_per_worker",
        )
    else:
        _check(cfg.batch_size_per_worker <= d.n_samples, "exceeds n_samples", "batch_size_per_worker")

    m = cfg.model
    _check(all(h >= 1 for h in m.hidden), "hidden widths must be >= 1", "model.hidden")
    _check(m.activation in ACTIVATIONS, f"must be one of {ACTIVATIONS}", "model.activation")
    o = cfg.optimizer
    _check(o.lr >= 0, "must be >= 0", "optimizer.lr")
    _check(0 <= o.momentum < 1, "must be in [0, 1)", "optimizer.momentum")

    for i, p in enumerate(cfg.injectors):
        path = f"injectors[{i}]"
        _check(p.kind in INJECTOR_KINDS, f"kind must be one of {INJECTOR_KINDS}", path + ".kind")
        _check(p.sigma >= 0 and p.sigma < float("inf"), "must be finite and >= 0", path + ".sigma")
        _check(
            len(p.targets) >= 1 and all(t in BF16_TARGETS for t in p.targets),
            f"targets must be a non-empty subset of {BF16_TARGETS}",
            path + ".targets",
        )


# -- parsing ----------------------------------------------------------------


def _line_index(node, prefix: str = "", out: Optional[dict] = None) -> dict[str, int]:
    """Map dotted field paths to 1-based source lines of a composed YAML node."""
    if out is None:
        out = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _line_index(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = item.start_mark.line + 1
            _line_index(item, path, out)
    return out


def _expect_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"expected a mapping, got {type(value).__name__}", path)
    return value


def _coerce(value, typ, path: str):
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise TypeError(typ)


def _build(cls, raw: dict, path: str, subparsers: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(f"unknown key '{key}'", sub)
        if key in subparsers:
            kwargs[key] = subparsers[key](value, sub)
        else:
            kwargs[key] = _coerce(value, _FIELD_TYPES[(cls, key)], sub)
    return cls(**kwargs)


def _int_tuple(value, path):
    if not isinstance(value, list):
        raise ConfigError("expected a list of integers", path)
    return tuple(_coerce(v, int, f"{path}[{i}]") for i, v in enumerate(value))


def _str_tuple(value, path):
    if not isinstance(value, list):
        raise ConfigError("expected a list of strings", path)
    return tuple(_coerce(v, str, f"{path}[{i}]") for i, v in enumerate(value))


def _injector(value, path):
    raw = _expect_mapping(value, path)
    if "kind" not in raw:
        raise ConfigError("missing 'kind'", path)
    kind = raw["kind"]
    allowed = {"grad_noise": {"kind", "sigma"}, "bf16_quantize": {"kind", "targets"}}.get(kind)
    if allowed is None:
        raise ConfigError(f"kind must be one of {INJECTOR_KINDS}", path + ".kind")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' for {kind}", f"{path}.{key}")
    return _build(PerturbationSpec, raw, path, {"targets": _str_tuple})


def _injectors(value, path):
    if not isinstance(value, list):
        raise ConfigError("expected a list", path)
    return tuple(_injector(v, f"{path}[{i}]") for i, v in enumerate(value))


_FIELD_TYPES = {
    (DataSpec, "n_samples"): int,
    (DataSpec, "input_dim"): int,
    (DataSpec, "n_classes"): int,
    (DataSpec, "class_sep"): float,
    (DataSpec, "seed"): int,
    (ModelSpec, "activation"): str,
    (OptimizerSpec, "lr"): float,
    (OptimizerSpec, "momentum"): float,
    (PerturbationSpec, "kind"): str,
    (PerturbationSpec, "sigma"): float,
    (ScenarioConfig, "name"): str,
    (ScenarioConfig, "world_size"): int,
    (ScenarioConfig, "steps"): int,
    (ScenarioConfig, "batch_size_per_worker"): int,
    (ScenarioConfig, "base_seed"): int,
    (ScenarioConfig, "seed_policy"): str,
    (ScenarioConfig, "alt_seed"): int,
    (ScenarioConfig, "sharding_mode"): str,
    (ScenarioConfig, "capture"): str,
    (ScenarioConfig, "sketch_k"): int,
    (ScenarioConfig, "sketch_seed"): int,
}

_SCENARIO_SUBPARSERS = {
    "data": lambda v, p: _build(DataSpec, _expect_mapping(v, p), p, {}),
    "model": lambda v, p: _build(ModelSpec, _expect_mapping(v, p), p, {"hidden": _int_tuple}),
    "optimizer": lambda v, p: _build(OptimizerSpec, _expect_mapping(v, p), p, {}),
    "injectors": _injectors,
}


def _with_lines(fn, lines: dict[str, int]):
    try:
        return fn()
    except ConfigError as exc:
        if exc.line is None:
            line = lines.get(exc.path)
            path = exc.path
            while line is None and path:
                path = path.rpartition(".")[0] if "." in path else path.rpartition("[")[0]
                line = lines.get(path)
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.path, line) from None
        raise


def scenario_from_dict(raw: Any, lines: Optional[dict[str, int]] = None, prefix: str = "") -> ScenarioConfig:
    lines = lines or {}

    def build():
        mapping = dict(_expect_mapping(raw, prefix))
        version = mapping.pop("schema_version", None)
        if version is None:
            raise ConfigError("missing schema_version", prefix or "schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})",
                              _join(prefix, "schema_version"))
        return _build(ScenarioConfig, mapping, prefix, _SCENARIO_SUBPARSERS)

    return _with_lines(build, lines)


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def parse_yaml(text: str, source: str = "<string>"):
    """Parse YAML text into ``(data, line_index)``."""
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"{source}: invalid YAML: {getattr(exc, 'problem', exc)}", line=line) from None
    return data, (_line_index(node) if node is not None else {})


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    data, lines = parse_yaml(path.read_text(encoding="utf-8"), str(path))
    return scenario_from_dict(data, lines)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

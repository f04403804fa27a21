"""Builtin scenarios and experiment suites with every hyperparameter pinned."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from dpdiag.sim.config import (
    SCHEMA_VERSION,
    ConfigError,
    PerturbationSpec,
    ScenarioConfig,
    _expect_mapping,
    _injectors,
    _with_lines,
    parse_yaml,
    scenario_from_dict,
)

# Shared noise (strict seeds) is common-mode across ranks; per-rank noise is
# not. It stands in for seeded local stochasticity such as dropout.
S1_NOISE = PerturbationSpec("grad_noise", sigma=0.1)

S1_BASE = ScenarioConfig(
    name="s1",
    world_size=8,
    steps=500,
    batch_size_per_worker=16,
    base_seed=1234,
    alt_seed=4321,
    sharding_mode="disjoint_shards",
    injectors=(S1_NOISE,),
)

# Replicated data isolates the injector: with sigma = 0 all ranks agree exactly.
SWEEP_BASE = ScenarioConfig(
    name="sigma-sweep",
    world_size=8,
    steps=200,
    batch_size_per_worker=16,
    base_seed=1234,
    seed_policy="per_rank",
    sharding_mode="replicated_data",
)
SWEEP_SIGMAS = (0.0, 0.01, 0.1)


def _noise(sigma: float) -> tuple[PerturbationSpec, ...]:
    return (PerturbationSpec("grad_noise", sigma),) if sigma else ()


SCENARIOS: dict[str, ScenarioConfig] = {
    "s1-1": S1_BASE.replace(name="s1-1", seed_policy="strict"),
    "s1-2": S1_BASE.replace(name="s1-2", seed_policy="rank0_differs"),
    "s1-3": S1_BASE.replace(name="s1-3", seed_policy="per_rank"),
    "control": SWEEP_BASE.replace(name="control", seed_policy="strict"),
    **{f"sigma-{s:g}": SWEEP_BASE.replace(name=f"sigma-{s:g}", injectors=_noise(s)) for s in SWEEP_SIGMAS},
}


@dataclass(frozen=True)
class ExperimentSuite:
    """Scenarios that share one base and differ only in seed policy / injectors."""

    name: str
    members: tuple[ScenarioConfig, ...]
    output_dir: Optional[str] = None

    def override(self, **changes: Any) -> "ExperimentSuite":
        changes = {k: v for k, v in changes.items() if v is not None}
        if not changes:
            return self
        return dataclasses.replace(self, members=tuple(m.replace(**changes) for m in self.members))


SUITES: dict[str, ExperimentSuite] = {
    "s1": ExperimentSuite("s1", (SCENARIOS["s1-1"], SCENARIOS["s1-2"], SCENARIOS["s1-3"]), "runs/s1"),
    "sigma-sweep": ExperimentSuite(
        "sigma-sweep", tuple(SCENARIOS[f"sigma-{s:g}"] for s in SWEEP_SIGMAS), "runs/sigma-sweep"
    ),
}

MEMBER_KEYS = {"name", "seed_policy", "alt_seed", "injectors"}


def suite_from_dict(raw: Any, lines: Optional[dict[str, int]] = None) -> ExperimentSuite:
    """Build a suite from a parsed file.

    Layout: ``schema_version``, ``name``, optional ``output_dir``, a ``base``
    scenario mapping, and ``members``, each overriding only ``name``,
    ``seed_policy``, ``alt_seed`` and ``injectors``.
    """
    lines = lines or {}

    def build():
        top = dict(_expect_mapping(raw, ""))
        version = top.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported or missing schema_version {version!r}", "schema_version")
        unknown = set(top) - {"name", "output_dir", "base", "members"}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown key '{key}'", key)
        name = top.get("name", "suite")
        if not isinstance(name, str):
            raise ConfigError("expected a string", "name")
        output_dir = top.get("output_dir")
        if output_dir is not None and not isinstance(output_dir, str):
            raise ConfigError("expected a string", "output_dir")
        base_raw = dict(_expect_mapping(top.get("base", {}), "base"))
        if "schema_version" in base_raw:
            raise ConfigError("schema_version belongs at the top level", "base.schema_version")
        base = scenario_from_dict({"schema_version": SCHEMA_VERSION, **base_raw}, prefix="base")
        members_raw = top.get("members")
        if not isinstance(members_raw, list) or not members_raw:
            raise ConfigError("expected a non-empty list", "members")
        members = []
        for i, m in enumerate(members_raw):
            path = f"members[{i}]"
            m = _expect_mapping(m, path)
            for key in m:
                if key not in MEMBER_KEYS:
                    raise ConfigError(
                        f"members may only override {sorted(MEMBER_KEYS)}, not '{key}'", f"{path}.{key}"
                    )
            changes: dict[str, Any] = {}
            for key in ("name", "seed_policy"):
                if key in m:
                    if not isinstance(m[key], str):
                        raise ConfigError("expected a string", f"{path}.{key}")
                    changes[key] = m[key]
            if "alt_seed" in m:
                if isinstance(m["alt_seed"], bool) or not isinstance(m["alt_seed"], int):
                    raise ConfigError("expected an integer", f"{path}.alt_seed")
                changes["alt_seed"] = m["alt_seed"]
            if "injectors" in m:
                changes["injectors"] = _injectors(m["injectors"], f"{path}.injectors")
            try:
                members.append(base.replace(**changes))
            except ConfigError as exc:
                raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.path}") from None
        names = [m.name for m in members]
        if len(set(names)) != len(names):
            raise ConfigError(f"member names must be unique, got {names}", "members")
        return ExperimentSuite(name, tuple(members), output_dir)

    return _with_lines(build, lines)


def load_suite(path) -> ExperimentSuite:
    path = Path(path)
    data, lines = parse_yaml(path.read_text(encoding="utf-8"), str(path))
    return suite_from_dict(data, lines)

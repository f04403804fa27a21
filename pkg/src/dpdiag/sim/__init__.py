"""Deterministic N-worker synchronous data-parallel training simulator."""

from dpdiag.sim.bf16 import bf16_round
from dpdiag.sim.config import (
    ConfigError,
    DataSpec,
    ModelSpec,
    OptimizerSpec,
    PerturbationSpec,
    ScenarioConfig,
    load_scenario,
)
from dpdiag.sim.harness import (
    HaltRun,
    all_reduce_mean,
    apply_injectors,
    derive_rank_seed,
    optimizer_step,
    run_scenario,
    shard_indices,
)
from dpdiag.sim.model import MLP, SyntheticDataset, generate_dataset

__all__ = [
    "ConfigError",
    "DataSpec",
    "HaltRun",
    "MLP",
    "ModelSpec",
    "OptimizerSpec",
    "PerturbationSpec",
    "ScenarioConfig",
    "SyntheticDataset",
    "all_reduce_mean",
    "apply_injectors",
    "bf16_round",
    "derive_rank_seed",
    "generate_dataset",
    "load_scenario",
    "optimizer_step",
    "run_scenario",
    "shard_indices",
]

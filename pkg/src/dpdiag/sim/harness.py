"""Synchronous data-parallel training, simulated in one process.

Each step, every rank draws its batch, computes its local loss and gradient,
applies any perturbation injectors, and the pre-reduction signals are
captured. Only then are the gradients averaged (in ascending rank order) and
applied by every rank to its own parameter replica.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from dpdiag import metrics, rng
from dpdiag.runlog import RunLog, RunManifest
from dpdiag.sim.bf16 import bf16_round
from dpdiag.sim.config import OptimizerSpec, PerturbationSpec, ScenarioConfig
from dpdiag.sim.model import MLP, SyntheticDataset, generate_dataset

logger = logging.getLogger(__name__)


class HaltRun(RuntimeError):
    """Training produced a non-finite value; ``log`` holds the completed steps."""

    def __init__(self, step: int, reason: str, log: Optional[RunLog] = None):
        super().__init__(f"run halted at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.log = log


class SynchronyError(AssertionError):
    pass


def derive_rank_seed(policy: str, base_seed: int, rank: int, alt_seed: Optional[int] = None) -> int:
    if policy == "strict":
        return base_seed
    if policy == "rank0_differs":
        if alt_seed is None:
            raise ValueError("rank0_differs needs an alternate seed")
        return alt_seed if rank == 0 else base_seed
    if policy == "per_rank":
        return base_seed + rank
    raise ValueError(f"unknown seed policy {policy!r}")


def strided_split(permutation: np.ndarray, rank: int, world_size: int) -> np.ndarray:
    """Positions ``rank, rank + N, ...`` of ``permutation``; tail trimmed so all ranks match."""
    usable = len(permutation) - len(permutation) % world_size
    return permutation[rank:usable:world_size]


def shard_indices(
    epoch: int,
    rank_seed: int,
    rank: int,
    world_size: int,
    n_samples: int,
    mode: str = "disjoint_shards",
) -> np.ndarray:
    """Sample indices a rank visits in ``epoch``, in visiting order.

    For ``replicated_data`` the caller passes the shared base seed as
    ``rank_seed`` and every rank receives the whole permutation.
    """
    if n_samples < world_size:
        raise ValueError(f"n_samples ({n_samples}) < world_size ({world_size})")
    perm = rng.stream(rank_seed, epoch, rng.STREAM_SHUFFLE).permutation(n_samples)
    if mode == "replicated_data":
        return perm
    if mode == "disjoint_shards":
        return strided_split(perm, rank, world_size)
    raise ValueError(f"unknown sharding mode {mode!r}")


def all_reduce_mean(gradients: Sequence[np.ndarray]) -> np.ndarray:
    if not gradients:
        raise ValueError("nothing to reduce")
    d = len(gradients[0])
    total = np.zeros(d)
    for rank, g in enumerate(gradients):
        if len(g) != d:
            raise metrics.DimensionMismatch(f"gradient of rank {rank} has dimension {len(g)}, expected {d}")
        total = total + g
    mean = total / len(gradients)
    # components on which all ranks agree are returned exactly
    first = np.asarray(gradients[0], dtype=np.float64)
    agree = np.ones(d, dtype=bool)
    for g in gradients[1:]:
        agree &= g == first
    return np.where(agree, first, mean)


def optimizer_step(
    params: np.ndarray,
    g: np.ndarray,
    spec: OptimizerSpec,
    velocity: Optional[np.ndarray] = None,
    step: int = 0,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Gradient descent, optionally with classical momentum.

    Returns ``(new_params, new_velocity)``; velocity is None without momentum.
    """
    if params.shape != g.shape:
        raise metrics.DimensionMismatch(f"parameter shape {params.shape} != gradient shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise HaltRun(step, "non-finite reduced gradient")
    if spec.momentum:
        velocity = g.copy() if velocity is None else spec.momentum * velocity + g
        update = velocity
    else:
        update = g
    with np.errstate(over="ignore"):
        return params - spec.lr * update, velocity


def apply_injectors(
    g: np.ndarray,
    injectors: Sequence[PerturbationSpec],
    rank_seed: int,
    step: int,
) -> np.ndarray:
    """Perturb a local gradient before reduction.

    Noise for injector ``i`` comes from the stream keyed by
    ``(rank_seed, step, i)``: ranks sharing a seed draw identical noise.
    """
    out = g
    for i, p in enumerate(injectors):
        if p.kind == "grad_noise":
            if p.sigma > 0:
                noise = rng.stream(rank_seed, step, rng.STREAM_NOISE, i).standard_normal(len(out))
                out = out + p.sigma * noise
        elif p.kind == "bf16_quantize":
            if "gradients" in p.targets:
                out = bf16_round(out)
        else:
            raise ValueError(f"unknown injector kind {p.kind!r}")
    return out


class _Sampler:
    """Per-rank batch cursor; shards are rebuilt at each epoch boundary."""

    def __init__(self, cfg: ScenarioConfig, rank: int, rank_seed: int):
        self.cfg = cfg
        self.rank = rank
        self.seed = cfg.base_seed if cfg.sharding_mode == "replicated_data" else rank_seed
        n = cfg.data.n_samples
        shard_len = n if cfg.sharding_mode == "replicated_data" else n // cfg.world_size
        self.batches_per_epoch = shard_len // cfg.batch_size_per_worker
        self._epoch = -1
        self._shard: Optional[np.ndarray] = None

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, j = divmod(step, self.batches_per_epoch)
        if epoch != self._epoch:
            self._shard = shard_indices(
                epoch, self.seed, self.rank, self.cfg.world_size, self.cfg.data.n_samples, self.cfg.sharding_mode
            )
            self._epoch = epoch
        b = self.cfg.batch_size_per_worker
        return self._shard[j * b:(j + 1) * b]


def build_manifest(cfg: ScenarioConfig, model: MLP) -> RunManifest:
    return RunManifest(
        run_id=cfg.run_id(),
        world_size=cfg.world_size,
        config=cfg.to_dict(),
        flattening=model.flattening(),
        prng=rng.PRNG_ID,
    )


def _capture(cfg: ScenarioConfig, rank: int, loss: float, g: np.ndarray) -> metrics.WorkerStepRecord:
    norm = metrics.grad_norm(g)
    if cfg.capture == "full":
        return metrics.WorkerStepRecord(rank, loss, norm, gradient=g)
    if cfg.capture == "sketch":
        return metrics.WorkerStepRecord(rank, loss, norm, sketch=metrics.sketch_project(g, cfg.sketch_k, cfg.sketch_seed))
    return metrics.WorkerStepRecord(rank, loss, norm)


def run_scenario(
    cfg: ScenarioConfig,
    dataset: Optional[SyntheticDataset] = None,
    on_step: Optional[Callable[[metrics.StepSnapshot, list[np.ndarray]], None]] = None,
) -> RunLog:
    """Simulate ``cfg.steps`` synchronous steps and return the captured log.

    ``on_step`` is called after each step with the snapshot and the
    post-update parameter replicas of every rank.
    """
    data = dataset if dataset is not None else generate_dataset(cfg.data)
    model = MLP(cfg.data.input_dim, cfg.data.n_classes, cfg.model)
    log = RunLog(build_manifest(cfg, model))

    n = cfg.world_size
    seeds = [derive_rank_seed(cfg.seed_policy, cfg.base_seed, r, cfg.alt_seed) for r in range(n)]
    samplers = [_Sampler(cfg, r, seeds[r]) for r in range(n)]
    replicas = [model.init_params(cfg.base_seed) for _ in range(n)]
    velocities: list[Optional[np.ndarray]] = [None] * n
    quantize_acts = any(p.kind == "bf16_quantize" and "activations" in p.targets for p in cfg.injectors)

    for step in range(cfg.steps):
        records, local = [], []
        for r in range(n):
            x, y = data.batch(samplers[r].batch_indices(step))
            with np.errstate(over="ignore", invalid="ignore"):
                loss, g = model.loss_and_grad(replicas[r], x, y, quantize_activations=quantize_acts)
                g = apply_injectors(g, cfg.injectors, seeds[r], step)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise HaltRun(step, f"non-finite local loss or gradient on rank {r}", log)
            records.append(_capture(cfg, r, loss, g))
            local.append(g)
        snapshot = metrics.StepSnapshot(step, tuple(records))

        reduced = all_reduce_mean(local)
        try:
            for r in range(n):
                replicas[r], velocities[r] = optimizer_step(replicas[r], reduced, cfg.optimizer, velocities[r], step)
        except HaltRun as exc:
            exc.log = log
            raise
        for r in range(1, n):
            if not np.array_equal(replicas[r], replicas[0]):
                raise SynchronyError(f"rank {r} parameters diverged from rank 0 at step {step}")
        log.snapshots.append(snapshot)
        if on_step is not None:
            on_step(snapshot, replicas)
    logger.debug("run %s finished %d steps", log.run_id, cfg.steps)
    return log


def final_mean_loss(log: RunLog) -> Optional[float]:
    if not log.snapshots:
        return None
    return metrics.loss_mean([r.loss for r in log.snapshots[-1].records])

"""Cross-worker consistency metrics for one synchronous data-parallel step.

All metrics are computed over the N per-worker signals captured *before* the
gradient all-reduce: the local losses and the local gradient vectors (or
their norms / random-projection sketches when full vectors are too large).

Sums use :func:`math.fsum`, which is exactly rounded and therefore
independent of summation order. Results are bit-reproducible and invariant
under any relabelling of the ranks.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from dpdiag import rng

EPS_NORM = 1e-12
DEFAULT_SKETCH_K = 1024


class MetricError(ValueError):
    """Base class for invalid metric inputs."""


class NonFiniteValue(MetricError):
    pass


class DimensionMismatch(MetricError):
    pass


class ZeroNormGradient(MetricError):
    """A gradient is too small to define a direction; exclude the pair."""


class FewerThanTwoWorkers(MetricError):
    pass


class IncompatibleSketches(MetricError):
    pass


@dataclass(frozen=True, eq=False)
class GradientSketch:
    """Gaussian random projection of a gradient onto ``k`` directions."""

    projected: np.ndarray
    sketch_seed: int
    source_dim: int

    @property
    def k(self) -> int:
        return int(self.projected.shape[0])

    def compatible_with(self, other: "GradientSketch") -> bool:
        return (
            self.sketch_seed == other.sketch_seed
            and self.source_dim == other.source_dim
            and self.k == other.k
        )


@dataclass(frozen=True, eq=False)
class WorkerStepRecord:
    """One worker's pre-reduction signals at one step.

    ``grad_norm`` is always present. At most one of ``gradient`` and
    ``sketch`` is set.
    """

    rank: int
    loss: float
    grad_norm: float
    gradient: Optional[np.ndarray] = None
    sketch: Optional[GradientSketch] = None

    def __post_init__(self):
        if self.gradient is not None and self.sketch is not None:
            raise ValueError("a record carries a full gradient or a sketch, not both")


@dataclass(frozen=True, eq=False)
class StepSnapshot:
    step: int
    records: tuple[WorkerStepRecord, ...] = field(default_factory=tuple)

    @property
    def world_size(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class ConsistencyMetrics:
    step: int
    mean_loss: float
    loss_dispersion: float
    loss_range: float
    mean_grad_norm: float
    grad_norm_dispersion: float
    grad_norm_range: float
    direction_consistency: Optional[float]
    excluded_pairs: int
    sketched: bool = False


FIELDS = (
    "step",
    "mean_loss",
    "loss_dispersion",
    "loss_range",
    "mean_grad_norm",
    "grad_norm_dispersion",
    "grad_norm_range",
    "direction_consistency",
    "excluded_pairs",
)


def as_loss_vector(losses: Sequence[float]) -> list[float]:
    values = [float(v) for v in losses]
    if not values:
        raise MetricError("loss vector must hold at least one worker")
    for rank, v in enumerate(values):
        if not math.isfinite(v):
            raise NonFiniteValue(f"loss of rank {rank} is not finite: {v}")
    return values


def as_gradient(g) -> np.ndarray:
    arr = np.asarray(g, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"gradient must be a flat vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("gradient has non-finite components")
    return arr


def _as_gradients(gradients) -> list[np.ndarray]:
    gs = [as_gradient(g) for g in gradients]
    if gs:
        d = gs[0].shape[0]
        for rank, g in enumerate(gs):
            if g.shape[0] != d:
                raise DimensionMismatch(
                    f"gradient of rank {rank} has dimension {g.shape[0]}, expected {d}"
                )
    return gs


def exact_mean(values: Sequence[float]) -> float:
    """Correctly rounded sum over N; a constant sequence returns its value exactly."""
    values = list(values)
    if not all(math.isfinite(v) for v in values):
        return sum(values) / len(values)  # propagate inf / nan
    if max(values) == min(values):
        return values[0]
    try:
        return math.fsum(values) / len(values)
    except OverflowError:
        return math.copysign(math.inf, sum(values))


_mean = exact_mean


def _population_std(values: list[float]) -> float:
    if max(values) == min(values):
        return 0.0
    mu = _mean(values)
    return math.sqrt(math.fsum((v - mu) ** 2 for v in values) / len(values))


def loss_mean(losses: Sequence[float]) -> float:
    return _mean(as_loss_vector(losses))


def loss_dispersion(losses: Sequence[float]) -> float:
    """Population (1/N) standard deviation of the per-worker losses."""
    return _population_std(as_loss_vector(losses))


def loss_range(losses: Sequence[float]) -> float:
    values = as_loss_vector(losses)
    return max(values) - min(values)


def grad_norm(g) -> float:
    """Euclidean norm; :func:`math.hypot` scales internally, so no overflow."""
    return math.hypot(*as_gradient(g).tolist())


def norm_stats(norms: Sequence[float]) -> tuple[float, float, float]:
    """(mean, population std, range) of already-computed gradient norms."""
    values = as_loss_vector(norms)
    return _mean(values), _population_std(values), max(values) - min(values)


def grad_norm_stats(gradients) -> tuple[float, float, float]:
    """Mean, dispersion and range of the per-worker gradient norms."""
    gs = _as_gradients(gradients)
    if not gs:
        raise MetricError("need at least one gradient")
    return norm_stats([grad_norm(g) for g in gs])


def _clamp(c: float) -> float:
    return min(1.0, max(-1.0, c))


def pairwise_cosine(gi, gj) -> float:
    gi, gj = _as_gradients([gi, gj])
    ni, nj = grad_norm(gi), grad_norm(gj)
    if ni < EPS_NORM or nj < EPS_NORM:
        raise ZeroNormGradient(f"gradient norm below {EPS_NORM}: ({ni}, {nj})")
    return _clamp(float(np.dot(gi / ni, gj / nj)))


def _mean_pairwise(units: np.ndarray, keep: list[bool]) -> tuple[Optional[float], int]:
    # one dot per pair: symmetric in (i, j), so rank relabelling is bit-exact
    n = len(keep)
    cosines = []
    excluded = 0
    for i in range(n):
        for j in range(i + 1, n):
            if keep[i] and keep[j]:
                cosines.append(_clamp(float(np.dot(units[i], units[j]))))
            else:
                excluded += 1
    if not cosines:
        return None, excluded
    return math.fsum(cosines) / len(cosines), excluded


def direction_consistency(gradients) -> tuple[Optional[float], int]:
    """Mean cosine over all unordered worker pairs.

    Pairs involving a gradient with norm below ``EPS_NORM`` are skipped and
    counted. Returns ``(None, n_pairs)`` when every pair is skipped.
    """
    gs = _as_gradients(gradients)
    if len(gs) < 2:
        raise FewerThanTwoWorkers(f"direction consistency needs N >= 2, got {len(gs)}")
    norms = [grad_norm(g) for g in gs]
    keep = [n >= EPS_NORM for n in norms]
    units = np.stack([g / n if k else np.zeros_like(g) for g, n, k in zip(gs, norms, keep)])
    return _mean_pairwise(units, keep)


# -- sketches ---------------------------------------------------------------


@functools.lru_cache(maxsize=2)
def _projection(sketch_seed: int, d: int, k: int) -> np.ndarray:
    rows = np.empty((k, d))
    for r in range(k):
        rows[r] = rng.stream(sketch_seed, r, rng.STREAM_SKETCH).standard_normal(d)
    rows /= math.sqrt(k)
    rows.setflags(write=False)
    return rows


def sketch_project(g, k: int = DEFAULT_SKETCH_K, sketch_seed: int = 0) -> GradientSketch:
    """Project ``g`` onto ``k`` seeded Gaussian directions scaled by 1/sqrt(k).

    Row ``r`` of the projection depends only on ``(sketch_seed, r, d)``, so
    sketches from different processes with equal parameters are comparable.
    """
    if k < 1:
        raise MetricError(f"sketch size must be >= 1, got {k}")
    g = as_gradient(g)
    return GradientSketch(_projection(sketch_seed, g.shape[0], k) @ g, sketch_seed, g.shape[0])


def sketch_project_many(gradients, k: int = DEFAULT_SKETCH_K, sketch_seed: int = 0) -> list[GradientSketch]:
    gs = _as_gradients(gradients)
    if not gs:
        return []
    d = gs[0].shape[0]
    projected = _projection(sketch_seed, d, k) @ np.stack(gs).T
    return [GradientSketch(np.ascontiguousarray(projected[:, i]), sketch_seed, d) for i in range(len(gs))]


def sketch_cosine(a: GradientSketch, b: GradientSketch) -> float:
    """Estimate of the cosine between the two source gradients.

    Not exact: the error shrinks like 1/sqrt(k).
    """
    if not a.compatible_with(b):
        raise IncompatibleSketches(
            f"sketches differ in (seed, d, k): ({a.sketch_seed}, {a.source_dim}, {a.k})"
            f" vs ({b.sketch_seed}, {b.source_dim}, {b.k})"
        )
    na, nb = grad_norm(a.projected), grad_norm(b.projected)
    if na < EPS_NORM or nb < EPS_NORM:
        raise ZeroNormGradient("sketch norm too small to define a direction")
    return _clamp(float(np.dot(a.projected / na, b.projected / nb)))


def sketch_direction_consistency(sketches: Sequence[GradientSketch], norms: Optional[Sequence[float]] = None):
    """Sketch-based counterpart of :func:`direction_consistency`.

    ``norms`` are the true gradient norms; when given they decide exclusion,
    otherwise the sketch norms do.
    """
    if len(sketches) < 2:
        raise FewerThanTwoWorkers(f"direction consistency needs N >= 2, got {len(sketches)}")
    for s in sketches[1:]:
        if not sketches[0].compatible_with(s):
            raise IncompatibleSketches("sketches in one step must share seed, d and k")
    sk_norms = [grad_norm(s.projected) for s in sketches]
    keep = [n >= EPS_NORM for n in sk_norms]
    if norms is not None:
        keep = [k and n >= EPS_NORM for k, n in zip(keep, norms)]
    units = np.stack(
        [s.projected / n if k else np.zeros(s.k) for s, n, k in zip(sketches, sk_norms, keep)]
    )
    return _mean_pairwise(units, keep)


# -- per-step ---------------------------------------------------------------


def step_metrics(snapshot: StepSnapshot) -> ConsistencyMetrics:
    """All consistency metrics for one aligned step of N worker records.

    Direction consistency uses full gradients when every record has one and
    sketches when every record has one (``sketched=True``). With norms only,
    or N = 1, it is reported absent.
    """
    records = snapshot.records
    n = len(records)
    if n == 0:
        raise MetricError(f"step {snapshot.step} has no worker records")
    losses = [r.loss for r in records]
    mean_loss = loss_mean(losses)
    d_loss = loss_dispersion(losses)
    r_loss = loss_range(losses)

    all_pairs = n * (n - 1) // 2
    direction: Optional[float] = None
    excluded = all_pairs
    sketched = False
    with_grad = sum(r.gradient is not None for r in records)
    with_sketch = sum(r.sketch is not None for r in records)
    if with_grad == n:
        gs = _as_gradients([r.gradient for r in records])
        norms = [grad_norm(g) for g in gs]
        if n >= 2:
            direction, excluded = direction_consistency(gs)
    elif with_sketch == n:
        norms = [r.grad_norm for r in records]
        sketched = True
        if n >= 2:
            direction, excluded = sketch_direction_consistency([r.sketch for r in records], norms)
    elif with_grad or with_sketch:
        raise MetricError(f"step {snapshot.step} mixes gradient payload kinds across ranks")
    else:
        norms = [r.grad_norm for r in records]
    g_mean, g_disp, g_range = norm_stats(norms)
    return ConsistencyMetrics(
        step=snapshot.step,
        mean_loss=mean_loss,
        loss_dispersion=d_loss,
        loss_range=r_loss,
        mean_grad_norm=g_mean,
        grad_norm_dispersion=g_disp,
        grad_norm_range=g_range,
        direction_consistency=direction,
        excluded_pairs=excluded,
        sketched=sketched,
    )

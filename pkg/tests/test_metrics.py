import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dpdiag import metrics
from dpdiag.metrics import StepSnapshot, WorkerStepRecord

TOL = 1e-12

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
loss_lists = st.lists(finite, min_size=1, max_size=16)


@pytest.mark.parametrize(
    "losses, expected",
    [([1.0, 1.0, 1.0], 1.0), ([1.0, 3.0], 2.0), ([0.5, 1.5, 2.5, 3.5], 2.0)],
)
def test_loss_mean(losses, expected):
    assert metrics.loss_mean(losses) == expected


@pytest.mark.parametrize("c", [0.1, -7.3, 1e9, 0.0])
def test_loss_dispersion_constant(c):
    assert metrics.loss_dispersion([c] * 7) == 0.0


def test_loss_dispersion_examples():
    assert abs(metrics.loss_dispersion([1.0, 3.0]) - 1.0) <= TOL
    # frozen from oracles.pstdev([1, 2, 3, 4]) == sqrt(1.25)
    assert abs(oracles.pstdev([1.0, 2.0, 3.0, 4.0]) - 1.118033988749895) <= TOL
    assert abs(metrics.loss_dispersion([1.0, 2.0, 3.0, 4.0]) - 1.118033988749895) <= TOL


def test_population_not_sample_std():
    # the N-1 form would give sqrt(2)
    assert metrics.loss_dispersion([1.0, 3.0]) == 1.0


@pytest.mark.parametrize("losses, expected", [([2.0], 0.0), ([1.0, 3.0], 2.0), ([-2.0, 0.0, 5.0], 7.0)])
def test_loss_range(losses, expected):
    assert metrics.loss_range(losses) == expected


@pytest.mark.parametrize("bad", [[float("nan")], [1.0, float("inf")], []])
def test_loss_vector_rejects(bad):
    with pytest.raises(metrics.MetricError):
        metrics.loss_mean(bad)


@pytest.mark.parametrize(
    "g, expected", [((3.0, 4.0), 5.0), (np.zeros(17), 0.0), ((1.0, 1.0, 1.0, 1.0), 2.0)]
)
def test_grad_norm(g, expected):
    assert metrics.grad_norm(g) == expected


def test_grad_norm_no_overflow():
    assert metrics.grad_norm([3e200, 4e200]) == pytest.approx(5e200, rel=1e-15)


def test_grad_norm_stats_examples():
    assert metrics.grad_norm_stats([np.array([1.0, 2.0, 2.0])] * 4) == (3.0, 0.0, 0.0)
    # norms 5 and 0: mean 2.5, pstdev 2.5, range 5
    mean, disp, rng_ = metrics.grad_norm_stats([(3.0, 4.0), (0.0, 0.0)])
    assert (mean, rng_) == (2.5, 5.0)
    assert abs(disp - oracles.pstdev([5.0, 0.0])) <= TOL
    assert abs(disp - 2.5) <= TOL
    assert metrics.grad_norm_stats([(1.0, 0.0), (0.0, 1.0)]) == (1.0, 0.0, 0.0)


def test_grad_norm_stats_dimension_mismatch():
    with pytest.raises(metrics.DimensionMismatch):
        metrics.grad_norm_stats([(1.0, 2.0), (1.0, 2.0, 3.0)])


def test_pairwise_cosine_examples():
    assert abs(metrics.pairwise_cosine((1, 2, 3), (1, 2, 3)) - 1.0) <= 1e-15
    assert metrics.pairwise_cosine((1, 0), (-1, 0)) == -1.0
    assert metrics.pairwise_cosine((1, 0), (0, 1)) == 0.0


def test_pairwise_cosine_clamped():
    g = np.array([0.1, 0.7, 1e-3, 3.3])
    for scale in (1.0, 3.0, 1e-6, 7e5):
        c = metrics.pairwise_cosine(g, scale * g)
        assert -1.0 <= c <= 1.0
        assert abs(c - 1.0) <= 1e-15


def test_pairwise_cosine_zero_norm():
    with pytest.raises(metrics.ZeroNormGradient):
        metrics.pairwise_cosine((0.0, 0.0), (1.0, 0.0))


def test_direction_consistency_examples():
    g = np.array([0.3, -1.2, 2.0])
    value, excluded = metrics.direction_consistency([g] * 5)
    assert excluded == 0 and abs(value - 1.0) <= TOL
    assert metrics.direction_consistency([(1, 0), (0, 1)]) == (0.0, 0)
    # pairs: cos 1, 0, 0
    assert oracles.direction_consistency([(1, 0), (1, 0), (0, 1)]) == (1 / 3, 0)
    value, excluded = metrics.direction_consistency([(1, 0), (1, 0), (0, 1)])
    assert excluded == 0 and abs(value - 1 / 3) <= TOL


def test_direction_consistency_exclusion():
    value, excluded = metrics.direction_consistency([(1.0, 0.0), (0.0, 0.0), (1.0, 1.0)])
    assert excluded == 2
    assert abs(value - 1 / math.sqrt(2)) <= TOL
    assert metrics.direction_consistency([(0.0, 0.0)] * 3) == (None, 3)


def test_direction_consistency_errors():
    with pytest.raises(metrics.FewerThanTwoWorkers):
        metrics.direction_consistency([(1.0, 2.0)])
    with pytest.raises(metrics.DimensionMismatch):
        metrics.direction_consistency([(1.0, 2.0), (1.0,)])


def _snap(losses, grads, step=0):
    return StepSnapshot(
        step,
        tuple(
            WorkerStepRecord(r, l, metrics.grad_norm(g), gradient=np.asarray(g, dtype=float))
            for r, (l, g) in enumerate(zip(losses, grads))
        ),
    )


def test_step_metrics_identical_workers():
    m = metrics.step_metrics(_snap([0.7] * 4, [(1.0, -2.0, 0.5)] * 4, step=3))
    assert m.step == 3 and m.mean_loss == 0.7
    assert m.loss_dispersion == m.loss_range == m.grad_norm_dispersion == m.grad_norm_range == 0.0
    assert abs(m.direction_consistency - 1.0) <= TOL and m.excluded_pairs == 0


def test_step_metrics_toy():
    m = metrics.step_metrics(_snap([1.0, 3.0], [(1.0, 0.0), (0.0, 1.0)]))
    assert (m.loss_dispersion, m.loss_range, m.grad_norm_dispersion, m.direction_consistency) == (
        1.0,
        2.0,
        0.0,
        0.0,
    )
    assert not m.sketched


def test_step_metrics_one_zero_gradient():
    grads = [(1.0, 2.0), (0.0, 0.0), (2.0, 1.0)]
    m = metrics.step_metrics(_snap([1.0, 1.0, 1.0], grads))
    expected, excluded = oracles.direction_consistency(grads)
    assert m.excluded_pairs == excluded == 2
    assert abs(m.direction_consistency - expected) <= TOL
    assert abs(expected - 0.8) <= TOL  # 4 / 5


def test_step_metrics_norm_only_and_single_worker():
    snap = StepSnapshot(0, (WorkerStepRecord(0, 1.0, 2.0), WorkerStepRecord(1, 2.0, 4.0)))
    m = metrics.step_metrics(snap)
    assert m.direction_consistency is None and m.excluded_pairs == 1
    assert (m.mean_grad_norm, m.grad_norm_dispersion, m.grad_norm_range) == (3.0, 1.0, 2.0)

    m1 = metrics.step_metrics(_snap([2.0], [(3.0, 4.0)]))
    assert m1.loss_dispersion == m1.loss_range == m1.grad_norm_dispersion == m1.grad_norm_range == 0.0
    assert m1.direction_consistency is None and m1.excluded_pairs == 0


def test_step_metrics_mixed_payloads_rejected():
    g = np.array([1.0, 0.0])
    sk = metrics.sketch_project(g, k=8, sketch_seed=1)
    snap = StepSnapshot(0, (WorkerStepRecord(0, 1.0, 1.0, gradient=g), WorkerStepRecord(1, 1.0, 1.0, sketch=sk)))
    with pytest.raises(metrics.MetricError):
        metrics.step_metrics(snap)


# -- sketches -----------------------------------------------------------------


def test_sketch_zero_and_determinism():
    z = metrics.sketch_project(np.zeros(50), k=16, sketch_seed=3)
    assert z.k == 16 and not np.any(z.projected)
    g = np.linspace(-1, 1, 50)
    a = metrics.sketch_project(g, k=16, sketch_seed=3)
    b = metrics.sketch_project(g, k=16, sketch_seed=3)
    assert a.projected.tobytes() == b.projected.tobytes()


def test_sketch_cosine_self_and_negation():
    g = np.sin(np.arange(300.0))
    a = metrics.sketch_project(g, k=64, sketch_seed=11)
    assert abs(metrics.sketch_cosine(a, a) - 1.0) <= 1e-15
    neg = metrics.sketch_project(-g, k=64, sketch_seed=11)
    assert metrics.sketch_cosine(a, neg) == -1.0


def test_sketch_incompatible():
    g = np.ones(20)
    a = metrics.sketch_project(g, k=8, sketch_seed=1)
    for other in (
        metrics.sketch_project(g, k=8, sketch_seed=2),
        metrics.sketch_project(g, k=9, sketch_seed=1),
        metrics.sketch_project(np.ones(21), k=8, sketch_seed=1),
    ):
        with pytest.raises(metrics.IncompatibleSketches):
            metrics.sketch_cosine(a, other)


def test_sketch_rows_depend_on_row_index_only():
    # a k=4 sketch is the first 4 rows of a k=8 sketch, up to the 1/sqrt(k) scale
    g = np.cos(np.arange(40.0))
    s4 = metrics.sketch_project(g, k=4, sketch_seed=5).projected * 2.0
    s8 = metrics.sketch_project(g, k=8, sketch_seed=5).projected * math.sqrt(8)
    np.testing.assert_allclose(s4, s8[:4], rtol=1e-13)


def test_sketch_project_many_matches_single():
    gs = [np.sin(np.arange(100.0) * (i + 1)) for i in range(3)]
    many = metrics.sketch_project_many(gs, k=32, sketch_seed=9)
    for g, s in zip(gs, many):
        np.testing.assert_allclose(s.projected, metrics.sketch_project(g, 32, 9).projected, rtol=1e-12, atol=1e-14)


def test_step_metrics_sketched():
    gs = [np.array([1.0, 0.0, 0.0, 2.0]), np.array([1.0, 0.0, 0.0, 2.0]) * 3]
    snap = StepSnapshot(
        0,
        tuple(
            WorkerStepRecord(r, 1.0, metrics.grad_norm(g), sketch=metrics.sketch_project(g, 32, 4))
            for r, g in enumerate(gs)
        ),
    )
    m = metrics.step_metrics(snap)
    assert m.sketched
    assert abs(m.direction_consistency - 1.0) <= 1e-12
    assert abs(m.mean_grad_norm - 2 * math.sqrt(5)) <= TOL


# -- properties -----------------------------------------------------------------


@given(loss_lists, st.randoms(use_true_random=False))
def test_loss_metrics_permutation_invariant(losses, rnd):
    shuffled = list(losses)
    rnd.shuffle(shuffled)
    for fn in (metrics.loss_mean, metrics.loss_dispersion, metrics.loss_range):
        assert fn(shuffled) == fn(losses)


@given(loss_lists, finite, st.floats(min_value=-50, max_value=50, allow_nan=False))
def test_loss_translation_and_scale(losses, c, a):
    d = metrics.loss_dispersion(losses)
    r = metrics.loss_range(losses)
    scale = max(1.0, max(abs(v) for v in losses), abs(c))
    assert metrics.loss_dispersion([v + c for v in losses]) == pytest.approx(d, abs=1e-9 * scale)
    assert metrics.loss_range([v + c for v in losses]) == pytest.approx(r, abs=1e-9 * scale)
    assert metrics.loss_dispersion([a * v for v in losses]) == pytest.approx(abs(a) * d, rel=1e-9, abs=1e-9)
    assert metrics.loss_range([a * v for v in losses]) == pytest.approx(abs(a) * r, rel=1e-9, abs=1e-9)


@given(loss_lists)
def test_dispersion_bounded_by_half_range(losses):
    d = metrics.loss_dispersion(losses)
    r = metrics.loss_range(losses)
    assert 0.0 <= d <= r / 2 * (1 + 1e-12)
    assert d == pytest.approx(oracles.pstdev(losses), rel=1e-9, abs=1e-9)


grad_sets = st.integers(2, 8).flatmap(
    lambda n: st.integers(1, 12).flatmap(
        lambda d: st.lists(st.lists(finite, min_size=d, max_size=d), min_size=n, max_size=n)
    )
)


@settings(max_examples=200)
@given(grad_sets)
def test_direction_consistency_bounds_and_oracle(gs):
    value, excluded = metrics.direction_consistency(gs)
    ref, ref_excluded = oracles.direction_consistency(gs)
    n = len(gs)
    assert excluded == ref_excluded
    assert (value is None) == (excluded == n * (n - 1) // 2)
    if value is not None:
        assert -1.0 <= value <= 1.0
        assert abs(value - ref) <= 1e-10


@given(grad_sets, st.data())
def test_direction_consistency_positive_rescaling(gs, data):
    scales = data.draw(st.lists(st.floats(1e-3, 1e3), min_size=len(gs), max_size=len(gs)))
    before, ex_before = metrics.direction_consistency(gs)
    after, ex_after = metrics.direction_consistency([[s * x for x in g] for g, s in zip(gs, scales)])
    if ex_before == ex_after and before is not None:
        assert after == pytest.approx(before, abs=1e-12)


@given(grad_sets, st.randoms(use_true_random=False))
def test_step_metrics_rank_permutation(gs, rnd):
    losses = [float(i) * 0.37 for i in range(len(gs))]
    order = list(range(len(gs)))
    rnd.shuffle(order)
    a = metrics.step_metrics(_snap(losses, gs))
    b = metrics.step_metrics(_snap([losses[i] for i in order], [gs[i] for i in order]))
    assert a == b


def test_direction_one_iff_positive_multiples():
    base = np.array([1.0, -2.0, 0.5])
    value, _ = metrics.direction_consistency([base, 2 * base, 0.1 * base])
    assert abs(value - 1.0) <= TOL
    value, _ = metrics.direction_consistency([base, 2 * base, base + np.array([0, 0, 1e-3])])
    assert value < 1.0

import csv

import numpy as np
import pytest

from convexdecomp.geometry import ConvexPrimitive, Decomposition, Params, hard_inside
from convexdecomp.losses import LossWeights, total_loss
from convexdecomp.refine import (TRACE_COLUMNS, FitTrace, PolishConfig, central_difference,
                                 grid_init, perturb, pipeline, polish, prune, random_init,
                                 split_all)
from convexdecomp.sampling import FREE, NORM_RANGES, SURFACE_IN, SURFACE_OUT, SampleSet


def test_central_difference_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    g = central_difference(lambda v: 0.5 * v @ A @ v, x)
    np.testing.assert_allclose(g, A @ x, rtol=1e-8)


def box_samples(rng, center, half, n=600):
    """Surface pairs on the faces of an axis-aligned box plus free samples around it."""
    center, half = np.asarray(center, float), np.asarray(half, float)
    face = rng.integers(0, 6, n)
    u = rng.uniform(-1, 1, (n, 3)) * half
    axis, sign = face % 3, np.where(face < 3, 1.0, -1.0)
    u[np.arange(n), axis] = sign * half[axis]
    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = sign
    surf_in = center + u - 0.03 * normal
    surf_out = center + u + 0.03 * normal
    free = center + rng.uniform(-2.0, 2.0, (n, 3)) * half
    c = ConvexPrimitive.box(center, half, smoothness=1e6)
    pos = np.concatenate([surf_in, surf_out, free])
    inside = np.r_[np.ones(n), np.zeros(n), hard_inside(c, free)]
    kind = np.r_[np.full(n, SURFACE_IN), np.full(n, SURFACE_OUT), np.full(n, FREE)]
    return SampleSet(pos, inside, kind, np.full(3 * n, -1))


@pytest.fixture
def fitted(rng):
    gt = Decomposition([ConvexPrimitive.box([0.1, 0.0, 0.4], [0.2, 0.15, 0.1])])
    return gt, box_samples(rng, [0.1, 0.0, 0.4], [0.2, 0.15, 0.1])


WEIGHTS = LossWeights(entropy=0.0)


def test_polish_from_truth_does_not_increase_loss(fitted):
    gt, s = fitted
    out, trace = polish(gt, s, WEIGHTS, PolishConfig(iters=20))
    assert trace.totals[-1] <= trace.totals[0] + 1e-9
    assert len(trace.rows) == 21
    for c in out.convexes:
        assert np.all(c.offsets > 0) and c.smoothness >= 1.0
        np.testing.assert_allclose(np.linalg.norm(c.axes, axis=1), 1.0, atol=1e-12)


def test_polish_recovers_shifted_box(fitted):
    gt, s = fitted
    start = Decomposition([ConvexPrimitive.box([0.13, 0.02, 0.38], [0.17, 0.13, 0.08])])
    out, trace = polish(start, s, WEIGHTS, PolishConfig(iters=300))
    assert trace.totals[-1] < 0.5 * trace.totals[0]
    # translation and offsets trade off, so compare the face planes
    c = out.convexes[0]
    faces = c.translation @ c.normals.T + c.offsets
    want = np.array([0.1, 0.0, 0.4]) @ c.normals.T + np.array([0.2, 0.15, 0.1] * 2)
    np.testing.assert_allclose(faces, want, atol=0.015)


def test_clip_norm_bounds_step(fitted):
    gt, s = fitted
    start = perturb(gt, 0.05, seed=1)
    cfg = PolishConfig(iters=1, learning_rate=1.0, clip_norm=1e-3, optimize_manhattan=False)
    out, _ = polish(start, s, WEIGHTS, cfg)
    a = Params.from_decomposition(start).flatten()[:-9]
    b = Params.from_decomposition(out).flatten()[:-9]
    # projection only shrinks the move, so the step stays within the clip radius
    assert np.linalg.norm(b - a) <= 1e-3 + 1e-12


def test_fixed_manhattan_untouched(fitted):
    gt, s = fitted
    M = np.eye(3) + 0.05
    start = gt.replace(manhattan=M)
    out, _ = polish(start, s, WEIGHTS, PolishConfig(iters=5, optimize_manhattan=False))
    np.testing.assert_array_equal(out.manhattan, M)


def test_config_validation():
    with pytest.raises(ValueError):
        PolishConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        PolishConfig(splits=-1)
    with pytest.raises(ValueError):
        PolishConfig(clip_norm=-1.0)


def test_prune_duplicate_removes_one(fitted):
    gt, s = fitted
    twin = Decomposition(gt.convexes * 2)
    out, events = prune(twin, s, WEIGHTS, eps=0.001)
    assert len(out) == 1 and len(events) == 1


def test_prune_keeps_separated(rng):
    a = ConvexPrimitive.box([-0.3, 0.0, 0.4], 0.1)
    b = ConvexPrimitive.box([0.3, 0.0, 0.4], 0.1)
    s = SampleSet.concat([box_samples(rng, [-0.3, 0, 0.4], [0.1] * 3, 300),
                          box_samples(rng, [0.3, 0, 0.4], [0.1] * 3, 300)])
    out, events = prune(Decomposition([a, b]), s, WEIGHTS, eps=0.001)
    assert len(out) == 2 and events == []


def test_prune_infinite_eps_leaves_one(fitted):
    _, s = fitted
    out, events = prune(random_init(6, seed=3), s, WEIGHTS, eps=np.inf)
    assert len(out) == 1 and len(events) == 5


def test_prune_events_replay(fitted):
    gt, s = fitted
    d = Decomposition(gt.convexes + random_init(3, seed=4).convexes)
    out, events = prune(d, s, WEIGHTS, eps=0.001)
    assert all(delta <= 0.001 for _, delta in events)
    assert len(out) == len(d) - len(events)


def test_split_all_count_and_order():
    d = random_init(24, seed=0)
    out = split_all(d)
    assert len(out) == 192
    # children of convex 0 come first and sit inside it
    centers = np.array([c.translation for c in out.convexes[:8]])
    assert np.all(hard_inside(d.convexes[0], centers))


def test_pipeline_never_grows(fitted):
    gt, s = fitted
    start = Decomposition(gt.convexes + random_init(3, seed=2).convexes)
    out, trace = pipeline(start, s, WEIGHTS, PolishConfig(iters=10))
    assert 1 <= len(out) <= len(start)
    assert trace.prune_events and trace.prune_events[0][0] == "initial"


def test_random_init_deterministic_and_in_range():
    a, b = random_init(5, seed=9), random_init(5, seed=9)
    for ca, cb in zip(a.convexes, b.convexes):
        np.testing.assert_array_equal(ca.translation, cb.translation)
        np.testing.assert_array_equal(ca.offsets, cb.offsets)
        assert np.all((ca.translation >= NORM_RANGES[:, 0]) & (ca.translation <= NORM_RANGES[:, 1]))
        assert np.all((ca.offsets >= 0.05) & (ca.offsets <= 0.2))
    with pytest.raises(ValueError):
        random_init(0)


def test_grid_init_finds_clusters(rng):
    centers = np.array([[-0.4, 0.0, 0.3], [0.0, 0.2, 0.5], [0.4, -0.2, 0.4]])
    pts = np.concatenate([c + rng.normal(0, 0.01, (200, 3)) for c in centers])
    s = SampleSet(pts, np.ones(len(pts)), np.full(len(pts), SURFACE_IN), np.full(len(pts), -1))
    d = grid_init(3, s, seed=0)
    got = np.array([c.translation for c in d.convexes])
    for c in centers:
        assert np.min(np.linalg.norm(got - c, axis=1)) < 0.05


def test_perturb_zero_is_identity(fitted):
    gt, _ = fitted
    assert perturb(gt, 0.0) is gt
    moved = perturb(gt, 0.05, seed=1)
    assert not np.allclose(moved.convexes[0].translation, gt.convexes[0].translation)
    assert np.all(moved.convexes[0].offsets > 0)


def test_trace_csv_columns(tmp_path, fitted):
    gt, s = fitted
    _, trace = polish(gt, s, WEIGHTS, PolishConfig(iters=3))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert float(rows[1][1]) == pytest.approx(total_loss(gt, s, WEIGHTS).total, rel=1e-12)


def test_trace_extend_offsets_iterations():
    a, b = FitTrace(), FitTrace()
    a.rows = [{"iter": 0, "total": 1.0}, {"iter": 1, "total": 0.5}]
    b.rows = [{"iter": 0, "total": 0.4}]
    a.extend(b)
    assert [r["iter"] for r in a.rows] == [0, 1, 2]

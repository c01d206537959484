"""Descent polishing, backward-selection pruning, splitting, and start points."""
import csv
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import special_ortho_group

from . import kernels
from .geometry import (DEFAULT_SIGMA, DEFAULT_SMOOTHNESS, ConvexPrimitive, Decomposition, Params,
                       SceneTransform, split_convex)
from .losses import TERMS, LossWeights, compute_structure, loss_and_grad, total_loss
from .sampling import FREE, NORM_RANGES, SHELL, SURFACE_IN, SURFACE_OUT, SampleSet, anneal_weights

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "total") + TERMS


class NumericalError(RuntimeError):
    pass


@dataclass
class PolishConfig:
    iters: int = 500
    learning_rate: float = 0.01
    n_samples: int = 250_000
    prune_epsilon: float = 0.001
    splits: int = 0
    seed: int = 0
    optimize_manhattan: bool = True
    prune: bool = True
    anneal: bool = False
    clip_norm: float = 0.25  # global gradient-norm cap; None or 0 disables

    def __post_init__(self):
        if self.iters < 0 or not self.learning_rate > 0 or self.n_samples <= 0:
            raise ValueError("iters, learning_rate and n_samples must be positive")
        if not self.prune_epsilon >= 0:
            raise ValueError("prune_epsilon must be non-negative")
        if self.splits < 0:
            raise ValueError("splits must be non-negative")
        if self.clip_norm is not None and self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative")


@dataclass
class FitTrace:
    rows: list = field(default_factory=list)
    prune_events: list = field(default_factory=list)
    wall_time: float = 0.0
    aborted: str = ""

    def record(self, it, breakdown):
        self.rows.append({"iter": it, "total": breakdown.total, **breakdown.terms()})

    @property
    def totals(self):
        return [r["total"] for r in self.rows]

    def extend(self, other):
        offset = self.rows[-1]["iter"] + 1 if self.rows else 0
        for r in other.rows:
            self.rows.append({**r, "iter": r["iter"] + offset})
        self.prune_events.extend(other.prune_events)
        self.wall_time += other.wall_time
        self.aborted = self.aborted or other.aborted

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r["iter"]] + [repr(float(r[c])) for c in TRACE_COLUMNS[1:]])


def central_difference(f, x, step=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return g


def numeric_gradient(decomp, samples, weights=None, step=1e-5, w_free=0.5, w_surface=0.5,
                     structure=None):
    """Finite-difference gradient of ``total_loss`` over the flattened parameters.

    Nearest-neighbour sets and closest-face masks are frozen at ``decomp``
    unless a structure is given, matching the piecewise treatment of the
    analytic gradient.
    """
    weights = LossWeights() if weights is None else weights
    p0 = Params.from_decomposition(decomp)
    K = len(p0)
    if structure is None:
        structure = _structure_at(p0, samples)

    def f(vec):
        return total_loss(Params.unflatten(vec, K), samples, weights, w_free, w_surface,
                          structure=structure, sigma=decomp.sigma).total

    return central_difference(f, p0.flatten(), step)


def _structure_at(p, samples):
    phi, face = kernels.sdf_forward(samples.positions, p.normals, p.offsets, p.translation,
                                    p.smoothness)
    return compute_structure(p, samples, face, phi)


def analytic_gradient(decomp, samples, weights=None, w_free=0.5, w_surface=0.5, structure=None):
    """Exact gradient of ``total_loss`` over the flattened parameters."""
    _, g = loss_and_grad(decomp, samples, weights, w_free, w_surface, structure=structure)
    return g.flatten()


def relative_error(a, b):
    denom = np.linalg.norm(b)
    if denom == 0:
        return float(np.linalg.norm(a))
    return float(np.linalg.norm(a - b) / denom)


def polish(decomp, samples, weights=None, cfg=None):
    """Fixed-step gradient descent, projecting back to valid parameters after each step.

    The gradient is rescaled to at most ``cfg.clip_norm`` in global L2 norm: with the
    steep sigmoid, large convexes that own most samples otherwise overshoot by several
    transition widths per step at the default learning rate.
    """
    weights = LossWeights() if weights is None else weights
    cfg = PolishConfig() if cfg is None else cfg
    trace = FitTrace()
    start = time.perf_counter()
    p = Params.from_decomposition(decomp)
    last_good = p.copy()
    lr = cfg.learning_rate
    for it in range(cfg.iters + 1):
        wf, ws = anneal_weights(it, cfg.iters) if cfg.anneal else (0.5, 0.5)
        try:
            b, g = loss_and_grad(p, samples, weights, wf, ws, sigma=decomp.sigma)
            gvec = g.flatten()
            finite = np.isfinite(b.total) and np.all(np.isfinite(gvec))
        except FloatingPointError:
            finite = False
        if not finite:
            trace.aborted = f"non-finite loss at iteration {it}"
            log.warning("polish aborted: %s", trace.aborted)
            p = last_good
            break
        trace.record(it, b)
        if it == cfg.iters:
            break
        last_good = p.copy()
        step = lr
        if cfg.clip_norm:
            norm = np.linalg.norm(gvec if cfg.optimize_manhattan else gvec[:-9])
            if norm > cfg.clip_norm:
                step = lr * cfg.clip_norm / norm
        p.axes -= step * g.axes
        p.offsets -= step * g.offsets
        p.translation -= step * g.translation
        p.smoothness -= step * g.smoothness
        if cfg.optimize_manhattan:
            p.manhattan -= step * g.manhattan
        p.project()
        if not np.all(np.isfinite(p.flatten())):
            trace.aborted = f"non-finite parameters after iteration {it}"
            log.warning("polish aborted: %s", trace.aborted)
            p = last_good
            break
    trace.wall_time = time.perf_counter() - start
    return p.to_decomposition(decomp), trace


def prune(decomp, samples, weights=None, eps=0.001, w_free=0.5, w_surface=0.5):
    """Backward selection in index order: drop a convex when removing it raises the
    total loss by at most ``eps``. Never removes the last convex.

    Returns the pruned decomposition and ``(original_index, delta)`` events.
    """
    weights = LossWeights() if weights is None else weights
    keep = list(range(len(decomp)))
    base = total_loss(decomp, samples, weights, w_free, w_surface).total
    events = []
    for i in range(len(decomp)):
        if len(keep) == 1:
            break
        trial = [j for j in keep if j != i]
        cand = decomp.replace(convexes=[decomp.convexes[j] for j in trial])
        loss = total_loss(cand, samples, weights, w_free, w_surface).total
        delta = loss - base
        if delta <= eps:
            keep = trial
            base = loss
            events.append((i, delta))
    return decomp.replace(convexes=[decomp.convexes[j] for j in keep]), events


def split_all(decomp):
    """Replace every convex by its eight children, children of convex 0 first."""
    return decomp.replace(convexes=[c for parent in decomp.convexes for c in split_convex(parent)])


def pipeline(decomp, samples, weights=None, cfg=None):
    """prune -> split (cfg.splits times) -> polish -> prune."""
    weights = LossWeights() if weights is None else weights
    cfg = PolishConfig() if cfg is None else cfg
    trace = FitTrace()
    if cfg.prune:
        decomp, events = prune(decomp, samples, weights, cfg.prune_epsilon)
        trace.prune_events.extend(("initial",) + e for e in events)
    for _ in range(cfg.splits):
        decomp = split_all(decomp)
    decomp, polish_trace = polish(decomp, samples, weights, cfg)
    trace.extend(polish_trace)
    if cfg.prune and not trace.aborted:
        decomp, events = prune(decomp, samples, weights, cfg.prune_epsilon)
        trace.prune_events.extend(("final",) + e for e in events)
    return decomp, trace


def random_init(K, seed=0, normalization=None, sigma=DEFAULT_SIGMA, smoothness=DEFAULT_SMOOTHNESS):
    """Identity-axis boxes with translations uniform over the normalized scene box
    and offsets uniform in [0.05, 0.2]."""
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    trans = rng.uniform(NORM_RANGES[:, 0], NORM_RANGES[:, 1], size=(K, 3))
    offs = rng.uniform(0.05, 0.2, size=(K, 6))
    convexes = [ConvexPrimitive(np.eye(3), d, c, smoothness) for c, d in zip(trans, offs)]
    return Decomposition(convexes, np.eye(3), normalization or SceneTransform(), sigma)


def kmeans(points, K, iters=20, seed=0):
    """Lloyd iterations from a seeded farthest-point start. Deterministic for a seed."""
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = [points[rng.integers(len(points))]]
    dist = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        centers.append(points[int(np.argmax(dist))])
        dist = np.minimum(dist, np.sum((points - centers[-1]) ** 2, axis=1))
    centers = np.array(centers)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for k in range(K):
            members = points[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    return centers


def grid_init(K, samples, seed=0, normalization=None, sigma=DEFAULT_SIGMA,
              smoothness=DEFAULT_SMOOTHNESS, offset=0.1):
    """Boxes of half-size ``offset`` at k-means centroids of the inside surface samples."""
    if K < 1:
        raise ValueError("K must be at least 1")
    pts = samples.positions[samples.kind == SURFACE_IN]
    if len(pts) == 0:
        pts = samples.positions[samples.inside == 1]
    if len(pts) == 0:
        raise ValueError("grid_init needs inside samples")
    if len(pts) < K:
        warnings.warn(f"only {len(pts)} inside samples for {K} convexes; centroids will repeat",
                      RuntimeWarning)
        centers = pts[np.arange(K) % len(pts)]
    else:
        centers = kmeans(pts, K, seed=seed)
    convexes = [ConvexPrimitive(np.eye(3), np.full(6, offset), c, smoothness) for c in centers]
    return Decomposition(convexes, np.eye(3), normalization or SceneTransform(), sigma)


def perturb(decomp, noise, seed=0, offset_noise=None):
    """Gaussian noise on translations (``noise``) and offsets (``offset_noise``,
    default ``noise``); offsets are clamped back to positive."""
    offset_noise = noise if offset_noise is None else offset_noise
    rng = np.random.default_rng(seed)
    p = Params.from_decomposition(decomp)
    if noise == 0 and offset_noise == 0:
        return decomp
    p.translation += rng.normal(0.0, 1.0, p.translation.shape) * noise
    p.offsets += rng.normal(0.0, 1.0, p.offsets.shape) * offset_noise
    return p.project().to_decomposition(decomp)


def random_instance(rng, k_max=4, n_samples=1000):
    """Random decomposition and labelled samples for gradient checks."""
    K = int(rng.integers(1, k_max + 1))
    convexes = []
    for _ in range(K):
        R = special_ortho_group.rvs(3, random_state=rng)
        convexes.append(ConvexPrimitive(R, rng.uniform(0.15, 0.4, 6), rng.uniform(-0.3, 0.3, 3),
                                        rng.uniform(30.0, 100.0)))
    M = np.eye(3) + rng.normal(0.0, 0.2, (3, 3))
    decomp = Decomposition(convexes, M, SceneTransform(), DEFAULT_SIGMA)
    pos = rng.uniform(-0.6, 0.6, (n_samples, 3))
    kind = rng.choice([SURFACE_IN, SURFACE_OUT, FREE, SHELL], size=n_samples)
    inside = np.where(kind == SURFACE_IN, 1,
                      np.where(kind == FREE, rng.integers(0, 2, n_samples), 0))
    seg = np.where(kind == SURFACE_IN, rng.integers(0, 4, n_samples), -1)
    return decomp, SampleSet(pos, inside, kind, seg)


def gradient_check(seed=7, n_instances=100, k_max=4, n_samples=1000, weights=None, step=1e-5):
    """Relative L2 error between analytic and finite-difference gradients on random instances."""
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        decomp, samples = random_instance(rng, k_max, n_samples)
        structure = _structure_at(Params.from_decomposition(decomp), samples)
        ga = analytic_gradient(decomp, samples, weights, structure=structure)
        gn = numeric_gradient(decomp, samples, weights, step, structure=structure)
        errors.append(relative_error(ga, gn))
    return errors

"""Smooth parallelepiped primitives, their union, and the scene transform.

A primitive has three outward axis normals ``a_0..a_2`` and six offsets.
Face ``h < 3`` has normal ``a_h``; face ``h >= 3`` has normal ``-a_{h-3}``.
Halfplane values are ``H_h(x) = n_h . (x - c) - d_h`` so a point is inside
the hard convex iff every ``H_h <= 0``.
"""
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np
from scipy.special import expit, logsumexp, softmax

DEFAULT_SMOOTHNESS = 100.0
DEFAULT_SIGMA = 150.0
MIN_OFFSET = 1e-4


def _frozen(a, shape):
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


def face_normals(axes):
    """(..., 3, 3) axes -> (..., 6, 3) face normals."""
    axes = np.asarray(axes)
    return np.concatenate([axes, -axes], axis=-2)


@dataclass(frozen=True)
class ConvexPrimitive:
    axes: np.ndarray
    offsets: np.ndarray
    translation: np.ndarray
    smoothness: float = DEFAULT_SMOOTHNESS

    def __post_init__(self):
        object.__setattr__(self, "axes", _frozen(self.axes, (3, 3)))
        object.__setattr__(self, "offsets", _frozen(self.offsets, (6,)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "smoothness", float(self.smoothness))
        if not np.all(np.isfinite(self.axes)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("non-finite convex parameters")
        norms = np.linalg.norm(self.axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError(f"axes must be unit length, got norms {norms}")
        if not np.all(self.offsets > 0):
            raise ValueError("offsets must be strictly positive")
        if not self.smoothness > 0:
            raise ValueError("smoothness must be positive")

    @property
    def normals(self):
        return face_normals(self.axes)

    @classmethod
    def box(cls, center, half_extents, axes=None, smoothness=DEFAULT_SMOOTHNESS):
        """Symmetric box with the given half extents along each axis."""
        h = np.asarray(half_extents, dtype=np.float64) * np.ones(3)
        return cls(np.eye(3) if axes is None else axes, np.concatenate([h, h]),
                   center, smoothness)


@dataclass(frozen=True)
class SceneTransform:
    """Per-axis affine map: ``normalized = (world - offset) / scale``."""

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "scale", _frozen(self.scale, (3,)))
        object.__setattr__(self, "offset", _frozen(self.offset, (3,)))
        if not np.all(self.scale > 0):
            raise ValueError("scale components must be positive")

    def to_norm(self, x_world):
        return (np.asarray(x_world, dtype=np.float64) - self.offset) / self.scale

    def to_world(self, x_norm):
        return np.asarray(x_norm, dtype=np.float64) * self.scale + self.offset


def to_norm(t, x_world):
    return t.to_norm(x_world)


def to_world(t, x_norm):
    return t.to_world(x_norm)


@dataclass(frozen=True)
class Decomposition:
    convexes: tuple
    manhattan: np.ndarray = field(default_factory=lambda: np.eye(3))
    normalization: SceneTransform = field(default_factory=SceneTransform)
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        object.__setattr__(self, "convexes", tuple(self.convexes))
        object.__setattr__(self, "manhattan", _frozen(self.manhattan, (3, 3)))
        object.__setattr__(self, "sigma", float(self.sigma))
        if len(self.convexes) < 1:
            raise ValueError("a decomposition needs at least one convex")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not np.all(np.isfinite(self.manhattan)):
            raise ValueError("manhattan matrix must be finite")

    def __len__(self):
        return len(self.convexes)

    def pack(self):
        """Stacked arrays: normals (K,6,3), offsets (K,6), translations (K,3), smoothness (K,)."""
        axes = np.stack([c.axes for c in self.convexes])
        return (face_normals(axes),
                np.stack([c.offsets for c in self.convexes]),
                np.stack([c.translation for c in self.convexes]),
                np.array([c.smoothness for c in self.convexes]))

    def replace(self, **changes):
        return replace(self, **changes)


def _points(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 3), x.ndim == 1


def halfplane_values(convex, x):
    """The six ``H_h(x)``; shape (6,) for one point or (N, 6)."""
    pts, single = _points(x)
    H = (pts - convex.translation) @ convex.normals.T - convex.offsets
    return H[0] if single else H


def sdf(convex, x):
    """``(1/delta) log sum_h exp(delta H_h(x))``, an upper bound on ``max_h H_h``."""
    H = halfplane_values(convex, x)
    return logsumexp(convex.smoothness * H, axis=-1) / convex.smoothness


def sdf_gradient(convex, x):
    """Analytic gradient of :func:`sdf` in x: softmax-weighted face normals."""
    H = halfplane_values(convex, x)
    w = softmax(convex.smoothness * H, axis=-1)
    return w @ convex.normals


def convex_scores(decomp, x):
    """Per-convex soft membership ``sigmoid(-sigma * phi_k(x))``, shape (N, K) or (K,)."""
    pts, single = _points(x)
    phi = np.stack([sdf(c, pts) for c in decomp.convexes], axis=-1)
    s = expit(-decomp.sigma * phi)
    return s[0] if single else s


def indicator(decomp, x):
    """Union score: max over convexes of the per-convex membership."""
    return convex_scores(decomp, x).max(axis=-1)


def volume_estimate(convex):
    d = convex.offsets
    return float((d[0] + d[3]) * (d[1] + d[4]) * (d[2] + d[5]))


def corners(convex):
    """The 8 vertices of an orthogonal-or-not parallelepiped, octant order (+/-x, +/-y, +/-z)."""
    d, A, c = convex.offsets, convex.axes, convex.translation
    pts = []
    for signs in product((1, -1), repeat=3):
        # Vertex where the three chosen faces meet: solve n_i . (v - c) = d_i.
        rows = np.array([s * A[i] for i, s in enumerate(signs)])
        rhs = np.array([d[i] if s > 0 else d[i + 3] for i, s in enumerate(signs)])
        pts.append(c + np.linalg.solve(rows, rhs))
    return np.array(pts)


def split_convex(parent):
    """Eight children: parent axes and smoothness, half offsets, translations at the
    midpoints between the parent translation and each corner."""
    return [ConvexPrimitive(parent.axes, parent.offsets / 2.0, 0.5 * (parent.translation + v),
                            parent.smoothness)
            for v in corners(parent)]


def hard_inside(convex, x, margin=0.0):
    return halfplane_values(convex, x).max(axis=-1) <= margin


@dataclass
class Params:
    """Unconstrained parameter arrays of a decomposition.

    Losses and gradients work on these directly; axes need not be unit length
    here. Flattened order per convex: axes (9), offsets (6), translation (3),
    smoothness (1); then the 9 Manhattan entries.
    """

    axes: np.ndarray
    offsets: np.ndarray
    translation: np.ndarray
    smoothness: np.ndarray
    manhattan: np.ndarray

    PER_CONVEX = 19

    @classmethod
    def from_decomposition(cls, decomp):
        return cls(np.stack([c.axes for c in decomp.convexes]),
                   np.stack([c.offsets for c in decomp.convexes]),
                   np.stack([c.translation for c in decomp.convexes]),
                   np.array([c.smoothness for c in decomp.convexes]),
                   np.array(decomp.manhattan))

    @classmethod
    def zeros(cls, k):
        return cls(np.zeros((k, 3, 3)), np.zeros((k, 6)), np.zeros((k, 3)), np.zeros(k),
                   np.zeros((3, 3)))

    def __len__(self):
        return len(self.offsets)

    @property
    def normals(self):
        return face_normals(self.axes)

    def flatten(self):
        per = np.concatenate([self.axes.reshape(-1, 9), self.offsets, self.translation,
                              self.smoothness[:, None]], axis=1)
        return np.concatenate([per.ravel(), self.manhattan.ravel()])

    @classmethod
    def unflatten(cls, vec, k):
        vec = np.asarray(vec, dtype=np.float64)
        per = vec[:k * cls.PER_CONVEX].reshape(k, cls.PER_CONVEX)
        return cls(per[:, :9].reshape(k, 3, 3).copy(), per[:, 9:15].copy(), per[:, 15:18].copy(),
                   per[:, 18].copy(), vec[k * cls.PER_CONVEX:].reshape(3, 3).copy())

    def copy(self):
        return Params(self.axes.copy(), self.offsets.copy(), self.translation.copy(),
                      self.smoothness.copy(), self.manhattan.copy())

    def project(self, min_offset=MIN_OFFSET, min_smoothness=1.0):
        """Unit axes, offsets >= min_offset, smoothness >= min_smoothness (in place)."""
        self.axes /= np.linalg.norm(self.axes, axis=2, keepdims=True)
        np.maximum(self.offsets, min_offset, out=self.offsets)
        np.maximum(self.smoothness, min_smoothness, out=self.smoothness)
        return self

    def to_decomposition(self, template):
        """Build a validated decomposition; sigma and normalization come from ``template``."""
        convexes = [ConvexPrimitive(a, d, c, s) for a, d, c, s in
                    zip(self.axes, self.offsets, self.translation, self.smoothness)]
        return Decomposition(convexes, self.manhattan, template.normalization, template.sigma)

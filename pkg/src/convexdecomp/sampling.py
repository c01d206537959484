"""Labeled 3D samples from depth (and optional segmentation) rasters."""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import SceneTransform

SURFACE_IN, SURFACE_OUT, FREE, SHELL = 0, 1, 2, 3
KIND_NAMES = ("surface_in", "surface_out", "free", "shell")

EPS_SURF = 0.03
THICKNESS = 0.1
FREE_Z_MIN = -0.1

# x, y, z targets of the normalized scene box
NORM_RANGES = np.array([[-2.0 / 3.0, 2.0 / 3.0], [-0.5, 0.5], [0.0, 0.8]])

SHELL_INNER = np.array([[-1.2, 1.2], [-1.0, 1.0], [-0.5, 1.3]])
SHELL_THICKNESS = 0.3
SHELL_OUTER = SHELL_INNER + np.array([-SHELL_THICKNESS, SHELL_THICKNESS])

MAX_LABEL = 40


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def ray_directions(self):
        """World-space direction (scaled so z = 1) for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass
class SampleSet:
    positions: np.ndarray
    inside: np.ndarray
    kind: np.ndarray
    seg: np.ndarray
    seed: object = None
    _tree: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.inside = np.asarray(self.inside, dtype=np.uint8).reshape(n)
        self.kind = np.asarray(self.kind, dtype=np.uint8).reshape(n)
        self.seg = np.asarray(self.seg, dtype=np.int16).reshape(n)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls, seed=None):
        return cls(np.zeros((0, 3)), [], [], [], seed)

    @property
    def counts(self):
        return {name: int(np.sum(self.kind == i)) for i, name in enumerate(KIND_NAMES)}

    @property
    def inside_index(self):
        return np.flatnonzero(self.inside == 1)

    def inside_tree(self):
        """KD-tree over inside samples (built once)."""
        if self._tree is None:
            self._tree = cKDTree(self.positions[self.inside_index])
        return self._tree

    def subset(self, idx):
        return SampleSet(self.positions[idx], self.inside[idx], self.kind[idx], self.seg[idx], self.seed)

    @staticmethod
    def concat(parts, seed=None):
        parts = [p for p in parts if len(p)]
        if not parts:
            return SampleSet.empty(seed)
        return SampleSet(np.concatenate([p.positions for p in parts]),
                         np.concatenate([p.inside for p in parts]),
                         np.concatenate([p.kind for p in parts]),
                         np.concatenate([p.seg for p in parts]), seed)


def depth_to_points(depth, cam):
    """Back-project valid pixels (depth > 0) through the pinhole model.

    Returns world points (P, 3) and their flat pixel indices (P,).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth is {depth.shape[::-1]} but camera expects "
                         f"{cam.width}x{cam.height}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth contains non-finite values")
    valid = depth > 0
    pix = np.flatnonzero(valid)
    pts = cam.ray_directions().reshape(-1, 3)[pix] * depth.reshape(-1)[pix, None]
    return pts, pix


def build_transform(points, ranges=NORM_RANGES):
    """Per-axis affine map sending the bounding box of ``points`` onto ``ranges``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot fit a transform to zero points")
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = hi - lo
    scale = np.ones(3)
    offset = np.zeros(3)
    for i in range(3):
        t_lo, t_hi = ranges[i]
        if extent[i] > 0:
            scale[i] = extent[i] / (t_hi - t_lo)
            offset[i] = lo[i] - t_lo * scale[i]
        else:
            warnings.warn(f"degenerate extent on axis {i}; using scale 1", RuntimeWarning)
            offset[i] = lo[i] - 0.5 * (t_lo + t_hi)
    return SceneTransform(scale, offset)


def _labels_for(seg, pix):
    if seg is None:
        return None
    seg = np.asarray(seg).reshape(-1)
    if seg.size and (seg.min() < 0 or seg.max() > MAX_LABEL):
        raise ValueError(f"segmentation labels must lie in [0, {MAX_LABEL}]")
    return seg[pix]


def surface_samples(points_norm, n, eps_surf=EPS_SURF, labels=None, rng=None):
    """``n/2`` pixels drawn with replacement, each giving an inside sample at
    ``Z + eps`` and an outside sample at ``Z - eps``. Inside samples come first."""
    if n % 2:
        raise ValueError("surface sample count must be even")
    points_norm = np.asarray(points_norm, dtype=np.float64).reshape(-1, 3)
    if len(points_norm) == 0:
        raise ValueError("no valid pixels to sample")
    rng = np.random.default_rng(rng)
    pick = rng.integers(0, len(points_norm), size=n // 2)
    base = points_norm[pick]
    up, down = base.copy(), base.copy()
    up[:, 2] += eps_surf
    down[:, 2] -= eps_surf
    m = n // 2
    seg = np.full(n, -1, dtype=np.int16)
    if labels is not None:
        lab = np.asarray(labels)[pick]
        seg[:m] = lab
        seg[m:] = lab
    return SampleSet(np.concatenate([up, down]),
                     np.r_[np.ones(m), np.zeros(m)],
                     np.r_[np.full(m, SURFACE_IN), np.full(m, SURFACE_OUT)], seg)


def free_space_samples(points_norm, n, t=THICKNESS, z_min=FREE_Z_MIN, rng=None):
    """Samples along orthographic z-rays through pixels: ``z ~ U[z_min, Z + t]``,
    inside iff ``Z <= z <= Z + t``."""
    points_norm = np.asarray(points_norm, dtype=np.float64).reshape(-1, 3)
    if n <= 0:
        return SampleSet.empty()
    if len(points_norm) == 0:
        raise ValueError("no valid pixels to sample")
    rng = np.random.default_rng(rng)
    pick = rng.integers(0, len(points_norm), size=n)
    base = points_norm[pick]
    Z = base[:, 2]
    z = rng.uniform(z_min, Z + t)
    pos = base.copy()
    pos[:, 2] = z
    inside = (z >= Z) & (z <= Z + t)
    return SampleSet(pos, inside, np.full(n, FREE), np.full(n, -1))


def in_shell(x):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    in_outer = np.all((x >= SHELL_OUTER[:, 0]) & (x <= SHELL_OUTER[:, 1]), axis=1)
    in_inner = np.all((x > SHELL_INNER[:, 0]) & (x < SHELL_INNER[:, 1]), axis=1)
    return in_outer & ~in_inner


def shell_samples(n, rng=None):
    """Uniform outside samples in the band between the inner and outer boxes."""
    rng = np.random.default_rng(rng)
    out = []
    have = 0
    while have < n:
        batch = rng.uniform(SHELL_OUTER[:, 0], SHELL_OUTER[:, 1], size=(max(2 * (n - have), 64), 3))
        batch = batch[in_shell(batch)]
        out.append(batch)
        have += len(batch)
    pos = np.concatenate(out)[:n] if out else np.zeros((0, 3))
    return SampleSet(pos, np.zeros(n), np.full(n, SHELL), np.full(n, -1))


def training_mix(n_free=6000, n_surface=12000, shell_fraction=0.10):
    """Composition of a sample set; the shell is carved out of the free-space budget."""
    if n_free < 0 or n_surface < 0 or not 0 <= shell_fraction <= 1:
        raise ValueError("invalid sample composition")
    n_shell = int(round(n_free * shell_fraction))
    return {"shell": n_shell, "free": n_free - n_shell, "surface": n_surface}


def split_total(total):
    """Split a total budget 1:2 free:surface; the surface share is rounded up to even."""
    n_surface = -(-2 * total // 3)
    n_surface += n_surface % 2
    return total - n_surface, n_surface


def anneal_weights(it, total_iters):
    """(w_free, w_surface): linear from (0.9, 0.1) to (0.5, 0.5) at the halfway point."""
    if it < 0:
        raise ValueError("iteration must be non-negative")
    half = total_iters / 2.0
    f = 1.0 if half <= 0 else min(it / half, 1.0)
    w_free = 0.9 - 0.4 * f
    return w_free, 1.0 - w_free


def generate_samples(depth, cam, transform, seg=None, n_free=6000, n_surface=12000,
                     shell_fraction=0.10, seed=0, eps_surf=EPS_SURF, t=THICKNESS):
    """Full training-style mix: surface pairs, free-space rays, outside shell.

    Each sample kind draws from its own child of ``SeedSequence(seed)``.
    """
    pts, pix = depth_to_points(depth, cam)
    if len(pts) == 0:
        raise ValueError("depth map has no valid pixels")
    pts_n = transform.to_norm(pts)
    labels = _labels_for(seg, pix)
    mix = training_mix(n_free, n_surface, shell_fraction)
    s_surf, s_free, s_shell = np.random.SeedSequence(seed).spawn(3)
    parts = [surface_samples(pts_n, mix["surface"], eps_surf, labels, np.random.default_rng(s_surf)),
             free_space_samples(pts_n, mix["free"], t, FREE_Z_MIN, np.random.default_rng(s_free)),
             shell_samples(mix["shell"], np.random.default_rng(s_shell))]
    return SampleSet.concat(parts, seed)

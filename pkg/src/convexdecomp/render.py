"""Ray-marched depth, normals and convex ids of a decomposition."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import sdf_gradient

MISS = 255
STEP = 0.005
HALVINGS = 20
Z_RANGE = (-0.1, 1.3)


@dataclass
class RenderOutput:
    depth: np.ndarray    # (H, W) world z in meters, 0 where missed
    normals: np.ndarray  # (H, W, 3) camera frame, facing the camera; 0 where missed
    ids: np.ndarray      # (H, W) uint8 convex index, MISS where missed
    points: np.ndarray   # (H, W, 3) normalized hit points, NaN where missed

    @property
    def hit(self):
        return self.ids != MISS


def ray_lines(cam, transform):
    """Per-pixel line ``p(z) = a + b z`` in normalized space, parametrized by normalized z,
    and the smallest z in front of the camera."""
    dirs = cam.ray_directions().reshape(-1, 3)
    s, o = transform.scale, transform.offset
    a = np.zeros_like(dirs)
    b = np.zeros_like(dirs)
    for i in range(2):
        b[:, i] = s[2] * dirs[:, i] / s[i]
        a[:, i] = (o[2] * dirs[:, i] - o[i]) / s[i]
    b[:, 2] = 1.0
    z_cam = (1e-9 - o[2]) / s[2]
    return a, b, z_cam


def raymarch(decomp, cam, step=STEP, n_halving=HALVINGS, z_range=Z_RANGE):
    """Fixed-step march along each pixel ray in normalized z, refined by interval
    halving at the first point where the union score reaches 0.5."""
    if len(decomp) > MISS:
        raise ValueError(f"at most {MISS} convexes can be rendered to an id map")
    a, b, z_cam = ray_lines(cam, decomp.normalization)
    z0 = np.full(len(a), max(z_range[0], z_cam))
    normals, offsets, trans, delta = decomp.pack()
    zhit, khit = kernels.march(a, b, z0, z_range[1], step, n_halving, normals, offsets, trans,
                               delta)
    H, W = cam.height, cam.width
    hit = khit >= 0
    pts = np.full((H * W, 3), np.nan)
    pts[hit] = a[hit] + b[hit] * zhit[hit, None]
    pts[hit, 2] = zhit[hit]
    depth = np.zeros(H * W)
    t = decomp.normalization
    depth[hit] = zhit[hit] * t.scale[2] + t.offset[2]
    ids = np.full(H * W, MISS, dtype=np.uint8)
    ids[hit] = khit[hit]
    out = RenderOutput(depth.reshape(H, W), np.zeros((H, W, 3)), ids.reshape(H, W),
                       pts.reshape(H, W, 3))
    out.normals = render_normals(decomp, out, cam)
    return out


def render_normals(decomp, render, cam=None):
    """Normalized SDF gradient of the hit convex at each hit point, in the camera frame,
    oriented toward the camera."""
    normals = np.zeros(render.ids.shape + (3,))
    t = decomp.normalization
    hit = render.hit
    for k in np.unique(render.ids[hit]):
        sel = render.ids == k
        g = sdf_gradient(decomp.convexes[int(k)], render.points[sel])
        # chain rule through normalized = (world - offset) / scale
        g = g / t.scale
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        normals[sel] = g
    # the view ray through a hit point has direction proportional to the world point
    world = np.where(hit[..., None], t.to_world(np.nan_to_num(render.points)), 0.0)
    flip = np.sum(normals * world, axis=-1) > 0
    normals[flip] *= -1.0
    return normals

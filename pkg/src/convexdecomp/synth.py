"""Desk-scale synthetic scenes: boxes on a floor slab, rendered to GT rasters."""
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import ConvexPrimitive, Decomposition, SceneTransform, volume_estimate
from .io import write_camera, write_decomposition, write_pfm, write_pgm
from .render import MISS, raymarch
from .sampling import NORM_RANGES, Camera

Z_NEAR, Z_FAR = 1.5, 5.0
# normalized depth where the floor meets the bottom and top image rows
FLOOR_Z_BOTTOM, FLOOR_Z_TOP = 0.2, 0.6
# normalized depth range of the floor contact points of the boxes
BOX_Z = (0.3, 0.36)


def default_camera(width=80, height=60):
    """NYUv2-like intrinsics scaled down to ``width`` x ``height``."""
    f = 518.8 * width / 640.0
    return Camera(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class SyntheticScene:
    decomposition: Decomposition
    depth: np.ndarray
    normals: np.ndarray
    ids: np.ndarray
    seg: np.ndarray
    camera: Camera
    labels: tuple

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        write_pfm(os.path.join(out_dir, "depth.pfm"), self.depth)
        write_pfm(os.path.join(out_dir, "normals.pfm"), self.normals)
        write_pgm(os.path.join(out_dir, "ids.pgm"), self.ids)
        write_pgm(os.path.join(out_dir, "seg.pgm"), self.seg)
        write_camera(os.path.join(out_dir, "camera.json"), self.camera)
        write_decomposition(os.path.join(out_dir, "gt.json"), self.decomposition)


def scene_transform(cam, z_near=Z_NEAR, z_far=Z_FAR):
    """Normalization that maps the view frustum between ``z_near`` and ``z_far``
    (meters) onto the normalized scene ranges."""
    (x0, x1), (y0, y1), (z0, z1) = NORM_RANGES
    tx = max(cam.cx, cam.width - 1 - cam.cx) / cam.fx
    ty = max(cam.cy, cam.height - 1 - cam.cy) / cam.fy
    return SceneTransform([z_far * tx / x1, z_far * ty / y1, (z_far - z_near) / (z1 - z0)],
                          [0.0, 0.0, z_near - z0 * (z_far - z_near) / (z1 - z0)])


def floor_plane(cam, transform):
    """(slope, intercept) of the floor ``y + slope * z = intercept`` in normalized
    coordinates, placed so it spans the image from bottom to top row."""
    ty = cam.cy / cam.fy
    s, o = transform.scale, transform.offset
    # normalized y of the top (-) and bottom (+) row rays as a + b z
    a, b = o[2] * ty / s[1], s[2] * ty / s[1]
    y_bottom = a + b * FLOOR_Z_BOTTOM
    y_top = -a - b * FLOOR_Z_TOP
    slope = (y_bottom - y_top) / (FLOOR_Z_TOP - FLOOR_Z_BOTTOM)
    return slope, y_bottom + slope * FLOOR_Z_BOTTOM


def floor_frame(slope, yaw=0.0):
    """Rows: in-floor x, floor-down normal, in-floor depth direction."""
    L = np.hypot(1.0, slope)
    down = np.array([0.0, 1.0, slope]) / L
    along = np.array([0.0, -slope, 1.0]) / L
    axes = np.array([[1.0, 0.0, 0.0], down, along])
    if yaw:
        axes = axes @ Rotation.from_rotvec(down * yaw).as_matrix().T
    return axes


def scene_boxes(n_boxes, seed=0, floor=True, rotated=False, cam=None, transform=None):
    """GT convexes in normalized coordinates, largest volume first, and their labels.

    Boxes stand on the floor in disjoint x slots and share the floor frame; with
    ``rotated`` the frame gets a random yaw about the floor normal. The frame is
    also the Manhattan basis (as columns).
    """
    if n_boxes < 1:
        raise ValueError("need at least one box")
    cam = cam or default_camera()
    transform = transform or scene_transform(cam)
    slope, intercept = floor_plane(cam, transform)
    rng = np.random.default_rng(seed)
    axes = floor_frame(slope, rng.uniform(-0.5, 0.5) if rotated else 0.0)
    x_ax, down, along = axes
    # visible half-width in normalized x at the depth of the boxes
    tx = cam.cx / cam.fx
    s, o = transform.scale, transform.offset
    half = (o[2] + s[2] * (BOX_Z[0] - 0.05)) * tx / s[0]
    width = 2.0 * half / n_boxes
    boxes = []
    for i in range(n_boxes):
        hx = rng.uniform(0.25, 0.35) * width
        hy = rng.uniform(0.07, 0.1)
        hz = rng.uniform(0.07, 0.1)
        x = -half + width * (i + 0.5) + rng.uniform(-0.08, 0.08) * width
        z = rng.uniform(*BOX_Z)
        base = np.array([0.0, intercept - slope * z, z])
        center = base + x * x_ax - hy * down
        boxes.append(ConvexPrimitive(axes, [hx, hy, hz, hx, hy, hz], center))
    labels = list(range(2, n_boxes + 2))
    order = np.argsort([-volume_estimate(b) for b in boxes], kind="stable")
    boxes = [boxes[i] for i in order]
    labels = [labels[i] for i in order]
    if floor:
        z = 0.5 * (FLOOR_Z_BOTTOM + FLOOR_Z_TOP)
        center = np.array([0.0, intercept - slope * z, z]) + 0.1 * down
        slab = ConvexPrimitive(axes, [1.2, 0.1, 0.8, 1.2, 0.1, 0.8], center)
        boxes.insert(0, slab)
        labels.insert(0, 1)
    return boxes, tuple(labels), axes.T


def synth_scene(n_boxes=3, seed=0, cam=None, floor=True, rotated=False):
    """Build a scene and render its GT depth, normals, convex ids and segmentation."""
    cam = cam or default_camera()
    transform = scene_transform(cam)
    boxes, labels, M = scene_boxes(n_boxes, seed, floor, rotated, cam, transform)
    decomp = Decomposition(boxes, M, transform)
    r = raymarch(decomp, cam)
    lut = np.zeros(256, dtype=np.uint8)
    lut[:len(labels)] = labels
    lut[MISS] = 0
    seg = lut[r.ids]
    return SyntheticScene(decomp, r.depth.astype(np.float32), r.normals.astype(np.float32),
                          r.ids, seg, cam, labels)

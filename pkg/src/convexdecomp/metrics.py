"""Depth, normal, segmentation and point-cloud metrics against ground-truth rasters."""
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .render import MISS
from .sampling import depth_to_points

THRESHOLDS = (11.25, 22.5, 30.0)
_ANGLE_TOL = 1e-9


@dataclass
class FitReport:
    abs_rel: float
    rmse: float
    normal_mean: float
    normal_median: float
    pct_11_25: float
    pct_22_5: float
    pct_30: float
    seg_accuracy: float
    chamfer_l1: float
    coverage: float

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=False)
            f.write("\n")


def normals_from_depth(depth, cam, face_camera=True, printed_pairing=False):
    """Per-pixel normals from image gradients of back-projected coordinates.

    Uses ``(-Z_x / X_x, -Z_y / Y_y, 1)``; ``printed_pairing`` swaps the
    denominators to ``(-Z_x / Y_y, -Z_y / X_x, 1)``. With ``face_camera``
    the result is negated so it points toward the viewer like rendered
    normals. Pixels that are invalid or touch an invalid neighbour get 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    dirs = cam.ray_directions()
    P = dirs * depth[..., None]
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    Z_y, Z_x = np.gradient(Z)
    X_x = np.gradient(X, axis=1)
    Y_y = np.gradient(Y, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        if printed_pairing:
            n = np.stack([-Z_x / Y_y, -Z_y / X_x, np.ones_like(Z)], axis=-1)
        else:
            n = np.stack([-Z_x / X_x, -Z_y / Y_y, np.ones_like(Z)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
    valid = depth > 0
    ok = valid.copy()
    ok[1:] &= valid[:-1]
    ok[:-1] &= valid[1:]
    ok[:, 1:] &= valid[:, :-1]
    ok[:, :-1] &= valid[:, 1:]
    ok &= np.all(np.isfinite(n), axis=-1)
    n[~ok] = 0.0
    return -n if face_camera else n


def depth_metrics(pred, gt):
    """(AbsRel, RMSE) over pixels valid in both rasters."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = (gt > 0) & (pred > 0)
    if not m.any():
        return float("nan"), float("nan")
    p, g = pred[m], gt[m]
    return float(np.mean(np.abs(p - g) / g)), float(np.sqrt(np.mean((p - g) ** 2)))


def coverage(pred, gt):
    """Fraction of valid ground-truth pixels that the prediction also covers."""
    gt_valid = np.asarray(gt) > 0
    if not gt_valid.any():
        return float("nan")
    return float(np.mean(np.asarray(pred)[gt_valid] > 0))


def angular_error(pred, gt):
    """Angle in degrees between unit normals (..., 3)."""
    dot = np.clip(np.sum(pred * gt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def normal_metrics(pred, gt, mask=None):
    """Mean/median angular error and the fraction within 11.25, 22.5 and 30 degrees
    (boundaries inclusive)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = (np.linalg.norm(pred, axis=-1) > 0) & (np.linalg.norm(gt, axis=-1) > 0)
    err = angular_error(pred[mask], gt[mask])
    if err.size == 0:
        nan = float("nan")
        return {"mean": nan, "median": nan, "pct_11_25": nan, "pct_22_5": nan, "pct_30": nan}
    out = {"mean": float(err.mean()), "median": float(np.median(err))}
    for key, thr in zip(("pct_11_25", "pct_22_5", "pct_30"), THRESHOLDS):
        out[key] = float(np.mean(err <= thr + _ANGLE_TOL))
    return out


def seg_accuracy(ids, gt_seg, valid=None):
    """Label each primitive with the most common ground-truth label in its support
    (ties to the smaller label), then score pixel accuracy over ``valid``.
    Missed pixels count as wrong."""
    ids = np.asarray(ids)
    gt_seg = np.asarray(gt_seg).astype(np.int64)
    if ids.shape != gt_seg.shape:
        raise ValueError("id and segmentation rasters differ in shape")
    valid = np.ones(ids.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        return float("nan")
    pred = np.full(ids.shape, -1, dtype=np.int64)
    for k in np.unique(ids[ids != MISS]):
        sel = ids == k
        counts = np.bincount(gt_seg[sel & valid], minlength=1) if (sel & valid).any() \
            else np.bincount(gt_seg[sel])
        pred[sel] = int(np.argmax(counts))
    return float(np.mean(pred[valid] == gt_seg[valid]))


def chamfer_l1(pred_depth, gt_depth, cam):
    """Symmetric Chamfer-L1 (mean unsquared nearest-neighbour distance, averaged over
    both directions) between back-projected point clouds, in meters."""
    p, _ = depth_to_points(pred_depth, cam)
    g, _ = depth_to_points(gt_depth, cam)
    if len(p) == 0 or len(g) == 0:
        return float("nan")
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


def evaluate(pred_depth, gt_depth, cam, pred_normals=None, gt_normals=None, pred_ids=None,
             gt_seg=None):
    """All metrics in one report. Missing normal rasters are derived from depth."""
    if pred_normals is None:
        pred_normals = normals_from_depth(pred_depth, cam)
    if gt_normals is None:
        gt_normals = normals_from_depth(gt_depth, cam)
    abs_rel, rmse = depth_metrics(pred_depth, gt_depth)
    mask = ((np.asarray(gt_depth) > 0) & (np.asarray(pred_depth) > 0)
            & (np.linalg.norm(pred_normals, axis=-1) > 0)
            & (np.linalg.norm(gt_normals, axis=-1) > 0))
    nm = normal_metrics(pred_normals, gt_normals, mask)
    seg = float("nan")
    if pred_ids is not None and gt_seg is not None:
        seg = seg_accuracy(pred_ids, gt_seg, np.asarray(gt_depth) > 0)
    return FitReport(abs_rel, rmse, nm["mean"], nm["median"], nm["pct_11_25"], nm["pct_22_5"],
                     nm["pct_30"], seg, chamfer_l1(pred_depth, gt_depth, cam),
                     coverage(pred_depth, gt_depth))

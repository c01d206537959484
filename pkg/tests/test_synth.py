import numpy as np
import pytest

from convexdecomp.geometry import volume_estimate
from convexdecomp.render import MISS, raymarch
from convexdecomp.sampling import NORM_RANGES, depth_to_points
from convexdecomp.synth import (default_camera, floor_frame, scene_boxes, scene_transform,
                                synth_scene)

CAM = default_camera(40, 30)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(3, seed=5, cam=CAM)


def test_labels_and_order(scene):
    assert scene.labels[0] == 1
    assert sorted(scene.labels[1:]) == [2, 3, 4]
    vols = [volume_estimate(c) for c in scene.decomposition.convexes[1:]]
    assert vols == sorted(vols, reverse=True)
    assert set(np.unique(scene.seg)) <= {1, 2, 3, 4}


def test_floor_fills_view(scene):
    assert np.all(scene.depth > 0)
    assert np.all(scene.ids != MISS)
    # every box is visible
    assert set(np.unique(scene.ids)) == {0, 1, 2, 3}


def test_visible_points_in_normalized_box(scene):
    pts, _ = depth_to_points(scene.depth.astype(np.float64), CAM)
    p = scene.decomposition.normalization.to_norm(pts)
    assert np.all(p >= NORM_RANGES[:, 0] - 1e-6) and np.all(p <= NORM_RANGES[:, 1] + 1e-6)


def test_depth_reproduces_from_gt(scene):
    r = raymarch(scene.decomposition, CAM)
    assert r.depth.astype(np.float32).tobytes() == scene.depth.tobytes()
    assert r.ids.tobytes() == scene.ids.tobytes()


def test_seed_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_scene(2, seed=8, cam=CAM).write(a)
    synth_scene(2, seed=8, cam=CAM).write(b)
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()
    c = synth_scene(2, seed=9, cam=CAM)
    assert c.depth.tobytes() != synth_scene(2, seed=8, cam=CAM).depth.tobytes()


def test_floor_frame_orthonormal():
    for yaw in (0.0, 0.4):
        R = floor_frame(0.7, yaw)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


def test_rotated_manhattan_matches_axes():
    boxes, _, M = scene_boxes(2, seed=1, rotated=True, cam=CAM, transform=scene_transform(CAM))
    for b in boxes:
        np.testing.assert_allclose(b.axes, M.T, atol=1e-12)


def test_no_floor_and_bad_count():
    s = synth_scene(1, seed=0, cam=CAM, floor=False)
    assert len(s.decomposition) == 1 and s.labels == (2,)
    assert np.any(s.ids == MISS) and np.all(s.depth[s.ids == MISS] == 0)
    with pytest.raises(ValueError):
        synth_scene(0, cam=CAM)

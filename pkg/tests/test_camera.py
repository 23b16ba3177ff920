import numpy as np
import pytest

from conftest import make_cloud
from splatdyn.camera import (
    Camera, DepthMap, look_at, orbit_rig, project, project_points, rasterize, read_depth_pgm,
    render_depth, write_depth_pgm,
)


def front_camera(w=64, h=48, f=50.0, dist=3.0):
    R, T = look_at([0.0, -dist, 0.0], [0.0, 0.0, 0.0])
    return Camera.from_intrinsics(f, f, w / 2, h / 2, R, T, w, h)


def test_point_on_axis_projects_to_principal_point():
    cam = front_camera()
    uv, z = project(cam, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(uv, [32.0, 24.0], atol=1e-12)
    assert z == pytest.approx(3.0)


def test_hand_projection():
    # x to the right of the image, world z up maps to image rows decreasing
    cam = front_camera()
    uv, z = project(cam, [0.3, 0.0, 0.6])
    np.testing.assert_allclose(uv, [32 + 50 * 0.3 / 3, 24 - 50 * 0.6 / 3], atol=1e-12)


def test_point_behind_camera():
    cam = front_camera()
    assert project(cam, [0.0, -5.0, 0.0]) is None
    _, _, ok = project_points(cam, [[0, -5, 0], [0, 0, 0]])
    assert ok.tolist() == [False, True]


def test_invalid_cameras():
    with pytest.raises(ValueError):
        Camera.from_intrinsics(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera.from_intrinsics(1.0, 1.0, 0, 0, 2 * np.eye(3), np.zeros(3), 4, 4)


def test_json_roundtrip():
    cam = front_camera()
    back = Camera.from_json(cam.to_json())
    np.testing.assert_allclose(back.K, cam.K)
    np.testing.assert_allclose(back.R, cam.R)
    np.testing.assert_allclose(back.T, cam.T)
    np.testing.assert_allclose(cam.center, [0, -3, 0], atol=1e-12)


def test_orbit_rig_layout():
    cams = orbit_rig(29, target=(1, 2, 3), radius=4.0)
    assert len(cams) == 29
    for c in cams:
        assert np.linalg.norm(c.center - [1, 2, 3]) == pytest.approx(4.0)
        # every camera looks at the target
        uv, z = project(c, [1, 2, 3])
        np.testing.assert_allclose(uv, [64, 64], atol=1e-9)
    np.testing.assert_allclose(cams[-1].center, [1, 2, 7], atol=1e-12)
    assert len(orbit_rig(30)) == 30 and len(orbit_rig(3)) == 3


def test_rasterize_nearest_wins_and_ties_go_low():
    cam = front_camera()
    pts = np.array([[0.0, 0.5, 0.0], [0.0, -0.5, 0.0], [0.0, -0.5, 0.0]])
    cloud = make_cloud(pts, sigma=0.02)
    depth, nearest = rasterize(cam, cloud)
    assert nearest[24, 32] == 1
    assert depth[24, 32] == pytest.approx(2.5)
    # reversing the visiting order changes nothing
    depth2, nearest2 = rasterize(cam, make_cloud(pts[::-1], sigma=0.02))
    np.testing.assert_array_equal(depth, depth2)
    assert nearest2[24, 32] == 0  # identical kernels: the lower index of the reversed cloud


def test_transparent_kernels_do_not_occlude():
    cam = front_camera()
    cloud = make_cloud(np.array([[0.0, 0.5, 0.0], [0.0, -0.5, 0.0]]), sigma=0.02)
    cloud = cloud.replace(opacities=[0.9, 0.01])
    _, nearest = rasterize(cam, cloud)
    assert nearest[24, 32] == 0


def test_depth_pgm_roundtrip(tmp_path, rng):
    d = rng.uniform(1.0, 5.0, (10, 12))
    d[3, 4] = np.inf
    dm = DepthMap(12, 10, d)
    m = write_depth_pgm(dm, tmp_path / "d.pgm")
    back = read_depth_pgm(tmp_path / "d.pgm", m)
    assert np.isinf(back.depth[3, 4])
    fin = np.isfinite(d)
    np.testing.assert_allclose(back.depth[fin], d[fin], atol=m / 65535)


def test_render_depth_shape():
    cam = front_camera()
    dm = render_depth(cam, make_cloud(np.zeros((1, 3)), sigma=0.05))
    assert dm.depth.shape == (48, 64)
    assert np.isfinite(dm.depth).sum() > 1

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clfusion.camera import (
    CameraRig,
    CameraView,
    box_corners,
    default_rig,
    project_box,
    project_point,
    ray_direction,
    ray_grid,
)
from clfusion.scene import ObjectRecord, SceneGenConfig, sample_random_scene


def identity_rig(f=100.0, u0=32.0, v0=16.0, grid=(33, 65)):
    return CameraRig((CameraView(f, f, u0, v0, np.eye(3), np.zeros(3)),), grid)


def test_rejects_bad_intrinsics_and_rotation():
    with pytest.raises(ValueError):
        CameraView(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        CameraView(1.0, 1.0, 0, 0, np.diag([1.0, 1.0, 1.001]), np.zeros(3))


def test_default_rig_shape():
    rig = default_rig()
    assert rig.n_views == 6 and rig.grid == (32, 80) and rig.n_keys == 6 * 32 * 80
    for v in rig.views:
        assert np.max(np.abs(v.rotation.T @ v.rotation - np.eye(3))) < 1e-10
    with pytest.raises(IndexError):
        rig.view(6)


def test_point_on_axis_and_offset():
    rig = identity_rig()
    assert project_point(rig, 0, (0, 0, 10)) == (32.0, 16.0, 10.0)
    u, v, d = project_point(rig, 0, (1, 0, 10))
    assert math.isclose(u, 42.0) and d == 10.0
    assert project_point(rig, 0, (0, 0, -5)) is None
    assert project_point(rig, 0, (0, 0, 0.1)) is None


def test_default_rig_forward_camera_axis():
    rig = default_rig()
    u, v, d = project_point(rig, 0, (10.0, 0.0, 0.0))
    cam = rig.view(0)
    assert math.isclose(u, cam.u0) and math.isclose(v, cam.v0) and math.isclose(d, 10.0)
    # y is left in the world, so a point to the left lands at smaller u
    assert project_point(rig, 0, (10.0, 1.0, 0.0))[0] < cam.u0


def test_box_on_axis_centered():
    rig = identity_rig()
    p = project_box(rig, 0, ObjectRecord((0.0, 0.0, 10.0), (2.0, 2.0, 2.0), 0.3))
    assert p.center == (32.0, 16.0)


def test_cube_radius_brute_force():
    rig = identity_rig()
    rec = ObjectRecord((0.0, 0.0, 10.0), (2.0, 2.0, 2.0), 0.0)
    p = project_box(rig, 0, rec)
    us, vs = [], []
    for x in (-1, 1):
        for y in (-1, 1):
            for z in (9.0, 11.0):
                us.append(32 + 100 * x / z)
                vs.append(16 + 100 * y / z)
    r = 0.5 * math.hypot(max(us) - min(us), max(vs) - min(vs))
    assert math.isclose(p.radius, r, rel_tol=1e-12)
    assert math.isclose(max(us) - 32, 100 / 9)


def test_box_behind_or_off_grid_not_visible():
    rig = identity_rig()
    assert project_box(rig, 0, ObjectRecord((0.0, 0.0, -10.0), (2.0, 2.0, 2.0), 0.0)) is None
    assert project_box(rig, 0, ObjectRecord((100.0, 0.0, 10.0), (1.0, 1.0, 1.0), 0.0)) is None


def test_box_corners_yaw():
    c = box_corners(ObjectRecord((0.0, 0.0, 0.0), (4.0, 2.0, 1.0), math.pi / 2))
    assert np.allclose(np.sort(c[:, 0]), [-1] * 4 + [1] * 4)
    assert np.allclose(np.sort(c[:, 1]), [-2] * 4 + [2] * 4)


def test_ray_directions():
    rig = identity_rig()
    assert np.allclose(ray_direction(rig, 0, (32, 16)), (0, 0, 1))
    d = ray_direction(rig, 0, (3, 30))
    assert math.isclose(np.linalg.norm(d), 1.0, abs_tol=1e-12)
    wide = identity_rig(f=10.0, u0=5.0, v0=5.0, grid=(11, 16))
    assert np.allclose(ray_direction(wide, 0, (15, 5)), np.array([1, 0, 1]) / math.sqrt(2))
    with pytest.raises(IndexError):
        ray_direction(rig, 0, (65, 0))


def test_ray_grid_matches_ray_direction():
    rig = default_rig(grid=(4, 6))
    g = ray_grid(rig)
    for v in range(rig.n_views):
        for j in range(4):
            for i in range(6):
                assert np.allclose(g[v, j, i], ray_direction(rig, v, (i, j)), atol=1e-12)
    assert np.allclose(np.linalg.norm(g, axis=-1), 1.0, atol=1e-12)


@given(st.floats(-40, 40), st.floats(-40, 40), st.floats(-2, 2))
def test_projection_ray_consistency(x, y, z):
    rig = default_rig(grid=(16, 40))
    p = np.array([x, y, z])
    for v in range(rig.n_views):
        pr = project_point(rig, v, p)
        if pr is None:
            continue
        i, j = round(pr[0]), round(pr[1])
        if not (0 <= i < rig.width and 0 <= j < rig.height):
            continue
        d = ray_direction(rig, v, (i, j))
        target = p - rig.view(v).center
        ang = math.acos(min(1.0, float(d @ target / np.linalg.norm(target))))
        cam = rig.view(v)
        pitch = max(math.atan(1.0 / cam.fx), math.atan(1.0 / cam.fy))
        assert ang < pitch


def test_every_object_visible_somewhere():
    rig = default_rig()
    for seed in range(1000):
        for rec in sample_random_scene(SceneGenConfig(), seed).objects:
            assert any(project_box(rig, v, rec) is not None for v in range(rig.n_views))


def test_rig_config_round_trip():
    rig = default_rig(n_views=4, grid=(8, 20))
    back = CameraRig.from_config(rig.to_config())
    assert back.grid == rig.grid
    for a, b in zip(rig.views, back.views):
        assert (a.fx, a.fy, a.u0, a.v0) == (b.fx, b.fy, b.u0, b.v0)
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)

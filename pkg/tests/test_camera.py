import numpy as np
import pytest

import fovsplat as fs
from fovsplat.camera import Camera, look_at, orbit_cameras, yaw_camera


def test_look_at_points_at_target():
    cam = look_at((10, 5, 3), (0, 0, 0))
    d = cam.forward
    assert np.allclose(d, -np.array([10, 5, 3]) / np.linalg.norm([10, 5, 3]), atol=1e-12)


def test_camera_validation():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(pose=bad, fov_deg=30, resolution=(8, 8))
    with pytest.raises(ValueError):
        Camera(pose=np.eye(4), fov_deg=0.0, resolution=(8, 8))
    with pytest.raises(ValueError):
        Camera(pose=np.eye(4), fov_deg=30, resolution=(8, 8), near=5.0, far=1.0)
    # reflection (det -1) rejected
    refl = np.eye(4)
    refl[0, 0] = -1.0
    with pytest.raises(ValueError):
        Camera(pose=refl, fov_deg=30, resolution=(8, 8))


def test_project_rays_round_trip():
    rng = np.random.default_rng(1)
    cam = look_at((7, -3, 11), (1, 0.5, -2), fov_deg=42, resolution=(64, 48), near=0.1, far=1000)
    uv = rng.uniform(0.05, 0.95, size=(32, 2))
    o, d = cam.rays_for_uv(uv)
    pts = o + d * rng.uniform(5, 50, size=(32, 1))
    uv2, dist = cam.project(pts)
    assert np.allclose(uv, uv2, atol=1e-9)
    assert np.all(dist > 0)


def test_pixel_center_uvs_orientation():
    cam = look_at((0, 0, 10), (0, 0, 0), fov_deg=40, resolution=(4, 4))
    uvs = cam.pixel_center_uvs().reshape(4, 4, 2)
    assert uvs[0, 0, 1] > uvs[3, 0, 1]  # top row has larger v
    assert uvs[0, 0, 0] < uvs[0, 3, 0]  # left column has smaller u


def test_yaw_preserves_position_and_rotates_forward():
    cam = look_at((0, 0, 10), (0, 0, 0), fov_deg=30, resolution=(8, 8))
    cam2 = yaw_camera(cam, 10.0)
    assert np.allclose(cam.position, cam2.position)
    ang = np.degrees(np.arccos(np.clip(np.dot(cam.forward, cam2.forward), -1, 1)))
    assert ang == pytest.approx(10.0, abs=1e-6)


def test_orbit_cameras_all_look_at_center():
    cams = orbit_cameras((1, 2, 3), 20.0, 8, resolution=(8, 8))
    assert len(cams) == 8
    for c in cams:
        to_center = np.array([1, 2, 3]) - c.position
        to_center /= np.linalg.norm(to_center)
        assert np.allclose(c.forward, to_center, atol=1e-9)

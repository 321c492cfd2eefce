"""Pinhole camera model and the projection conventions used across the system.

Right-handed, y-up world. A camera looks along its local -Z axis and ``pose``
is the rigid world-from-camera matrix. UV coordinates run u right, v up with
(0,0) at the bottom-left of the image, so NDC = 2*uv - 1; image arrays are
stored row 0 at the top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROT_TOL = 1e-5


@dataclass
class Camera:
    pose: np.ndarray  # 4x4 world-from-camera
    fov_deg: float  # vertical field of view
    resolution: tuple[int, int]  # (width, height)
    near: float = 1.0
    far: float = 10000.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=ROT_TOL):
            raise ValueError("pose rotation block is not orthonormal")
        if np.linalg.det(r) < 1.0 - ROT_TOL:
            raise ValueError("pose rotation block must have determinant +1")
        if not np.allclose(self.pose[3], [0, 0, 0, 1], atol=ROT_TOL):
            raise ValueError("pose bottom row must be (0,0,0,1)")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError("fov must lie in (0, 180) degrees")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError("resolution must be positive")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def forward(self) -> np.ndarray:
        """Unit view direction (world space)."""
        return -self.pose[:3, 2].copy()

    @property
    def aspect(self) -> float:
        return self.resolution[0] / self.resolution[1]

    def view_matrix(self) -> np.ndarray:
        r = self.pose[:3, :3]
        t = self.pose[:3, 3]
        v = np.eye(4)
        v[:3, :3] = r.T
        v[:3, 3] = -r.T @ t
        return v

    def projection_matrix(self) -> np.ndarray:
        """OpenGL-style perspective projection (NDC in [-1,1]^3)."""
        f = 1.0 / np.tan(np.radians(self.fov_deg) / 2.0)
        n, fr = self.near, self.far
        p = np.zeros((4, 4))
        p[0, 0] = f / self.aspect
        p[1, 1] = f
        p[2, 2] = (fr + n) / (n - fr)
        p[2, 3] = 2 * fr * n / (n - fr)
        p[3, 2] = -1.0
        return p

    def focal_px(self) -> float:
        """Focal length in pixels (square pixels, vertical fov)."""
        return self.resolution[1] / (2.0 * np.tan(np.radians(self.fov_deg) / 2.0))

    def rays_for_uv(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origins, unit directions) through the given uv points."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        ndc = 2.0 * uv - 1.0
        tan_half = np.tan(np.radians(self.fov_deg) / 2.0)
        d_cam = np.stack(
            [ndc[:, 0] * tan_half * self.aspect, ndc[:, 1] * tan_half, -np.ones(len(ndc))], axis=1
        )
        d_world = d_cam @ self.pose[:3, :3].T
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d_world.shape).copy()
        return o, d_world

    def pixel_center_uvs(self) -> np.ndarray:
        """(H*W, 2) uv coordinates of all pixel centers, row-major from the top row."""
        w, h = self.resolution
        cols = (np.arange(w) + 0.5) / w
        rows = 1.0 - (np.arange(h) + 0.5) / h
        u, v = np.meshgrid(cols, rows)
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def project(self, p_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World point(s) -> (uv, world distance from the camera position).

        Points behind the camera get a negative distance.
        """
        p = np.atleast_2d(np.asarray(p_world, dtype=np.float64))
        pv = self.projection_matrix() @ self.view_matrix()
        ph = np.concatenate([p, np.ones((len(p), 1))], axis=1)
        clip = ph @ pv.T
        w = clip[:, 3:4]
        ndc = clip[:, :3] / np.where(np.abs(w) < 1e-12, 1e-12, w)
        uv = (ndc[:, :2] + 1.0) / 2.0
        dist = np.linalg.norm(p - self.position, axis=1)
        cam_z = (p - self.position) @ (-self.pose[:3, 2])
        dist = np.where(cam_z > 0, dist, -dist)
        return uv, dist


def look_at(
    eye,
    target,
    up=(0.0, 1.0, 0.0),
    fov_deg: float = 20.0,
    resolution: tuple[int, int] = (512, 512),
    near: float = 1.0,
    far: float = 10000.0,
) -> Camera:
    """Camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    if abs(np.dot(fwd, up / np.linalg.norm(up))) > 0.999:
        up = np.array([0.0, 0.0, 1.0]) if abs(fwd[1]) > 0.999 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = eye
    return Camera(pose=pose, fov_deg=fov_deg, resolution=resolution, near=near, far=far)


def yaw_camera(cam: Camera, degrees: float) -> Camera:
    """Rotate the camera about its own up axis (positive = turn left)."""
    a = np.radians(degrees)
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    pose = cam.pose.copy()
    pose[:3, :3] = pose[:3, :3] @ rot
    return Camera(pose=pose, fov_deg=cam.fov_deg, resolution=cam.resolution, near=cam.near, far=cam.far)


def orbit_cameras(
    center,
    radius: float,
    count: int,
    fov_deg: float = 20.0,
    resolution: tuple[int, int] = (512, 512),
    near: float = 1.0,
    far: float = 10000.0,
    elevation_deg: float = 15.0,
) -> list[Camera]:
    """Evenly spaced ring of cameras looking at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    el = np.radians(elevation_deg)
    for k in range(count):
        az = 2 * np.pi * k / count
        eye = center + radius * np.array(
            [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)]
        )
        cams.append(look_at(eye, center, fov_deg=fov_deg, resolution=resolution, near=near, far=far))
    return cams


def fibonacci_sphere_cameras(
    center,
    radius: float,
    count: int,
    fov_deg: float = 30.0,
    resolution: tuple[int, int] = (512, 512),
    near: float = 1.0,
    far: float = 10000.0,
) -> list[Camera]:
    """Fibonacci-lattice directions on a sphere, all looking at ``center``.

    Used for the initial training-view distribution around a volume.
    """
    center = np.asarray(center, dtype=np.float64)
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for k in range(count):
        y = 1.0 - 2.0 * (k + 0.5) / count
        r = np.sqrt(max(0.0, 1.0 - y * y))
        th = golden * k
        d = np.array([np.cos(th) * r, y, np.sin(th) * r])
        cams.append(look_at(center + radius * d, center, fov_deg=fov_deg, resolution=resolution, near=near, far=far))
    return cams

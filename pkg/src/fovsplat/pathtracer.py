"""Monte Carlo volumetric path tracer.

Produces posed RGBA+depth foveal frames with an albedo auxiliary buffer,
the surface-aligned initial point cloud, and a deterministic denoiser
(joint-bilateral, optionally temporal against a reprojected history frame).

Estimator: delta (Woodcock) tracking for free flight with majorant
``max transfer alpha * sigma_scale``, transfer alpha as the scattering
probability, transfer RGB as single-scattering albedo, isotropic phase,
environment lighting picked up at ray escape, paths truncated after
``max_bounces`` scatterings. Primary rays go through pixel centers, so the
zero-scatter (background) term is the environment along the center ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .camera import Camera
from .volume import EnvironmentMap, TransferFunction, Volume, sample_density

TF_LUT_SIZE = 1024
DEFAULT_SIGMA_SCALE = 0.05  # extinction per world mm at transfer alpha 1 (50/m)


@dataclass
class RenderSettings:
    spp: int = 8
    max_bounces: int = 4
    seed: int = 0
    hit_alpha_threshold: float = 0.1
    albedo_march_steps: int = 16
    sigma_scale: float = DEFAULT_SIGMA_SCALE

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if not 1 <= self.max_bounces <= 4:
            raise ValueError("max_bounces must lie in [1, 4]")
        if not 0.0 < self.hit_alpha_threshold < 1.0:
            raise ValueError("hit_alpha_threshold must lie in (0, 1)")
        if self.albedo_march_steps < 0:
            raise ValueError("albedo_march_steps must be >= 0")
        if self.sigma_scale <= 0.0:
            raise ValueError("sigma_scale must be positive")


@dataclass
class FoveatedFrame:
    """Posed render output: 8-bit RGBA, linear depth of the first significant
    hit (0 = none), and the albedo buffer used by the denoiser."""

    frame_id: int
    camera: Camera
    rgba: np.ndarray  # (H, W, 4) uint8
    depth: np.ndarray  # (H, W) float32, world distance
    albedo: np.ndarray  # (H, W, 3) float32
    timestamp_ms: int = 0

    def __post_init__(self):
        w, h = self.camera.resolution
        if self.rgba.shape != (h, w, 4) or self.rgba.dtype != np.uint8:
            raise ValueError("rgba must be (H, W, 4) uint8 at the camera resolution")
        if self.depth.shape != (h, w):
            raise ValueError("depth resolution mismatch")
        if self.albedo.shape != (h, w, 3):
            raise ValueError("albedo resolution mismatch")

    @property
    def rgb_f(self) -> np.ndarray:
        return self.rgba[:, :, :3].astype(np.float64) / 255.0

    @property
    def alpha_f(self) -> np.ndarray:
        return self.rgba[:, :, 3].astype(np.float64) / 255.0


@dataclass
class ColoredPoint:
    position: np.ndarray  # world
    rgba: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rgba = np.asarray(self.rgba, dtype=np.float64).reshape(4)


def _require_rigid(vol: Volume) -> np.ndarray:
    """The tracer marches in local mm; a non-rigid placement would distort
    distances, so only rotation+translation transforms are accepted here."""
    r = vol.world_transform[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
        raise ValueError("path tracing requires a rigid volume world_transform")
    return r


def _to_local(vol: Volume, points: np.ndarray) -> np.ndarray:
    ph = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    return (vol.world_to_local @ ph.T).T[:, :3]


def _luts(tf: TransferFunction) -> tuple[np.ndarray, np.ndarray]:
    lut = tf.bake_lut(TF_LUT_SIZE).astype(np.float64)
    return np.ascontiguousarray(lut[:, 3]), np.ascontiguousarray(lut[:, :3])


def march_step(vol: Volume) -> float:
    return 0.5 * float(min(vol.spacing))


def render(
    vol: Volume,
    tf: TransferFunction,
    env: EnvironmentMap,
    cam: Camera,
    settings: RenderSettings,
    frame_id: int = 0,
    timestamp_ms: int = 0,
) -> FoveatedFrame:
    """Path-trace one posed frame. Deterministic in (inputs, seed, frame_id)."""
    rot = _require_rigid(vol)
    w, h = cam.resolution
    uvs = cam.pixel_center_uvs()
    origins_w, dirs_w = cam.rays_for_uv(uvs)
    origin_local = _to_local(vol, origins_w[:1])[0]
    dirs_local = np.ascontiguousarray(dirs_w @ rot)  # R^T applied row-wise

    alpha_lut, rgb_lut = _luts(tf)
    sigma_maj = tf.max_alpha * settings.sigma_scale
    size = vol.size_mm

    fg, bg_count = _kernels.render_paths(
        vol.data,
        np.asarray(vol.spacing, dtype=np.float64),
        size,
        alpha_lut,
        rgb_lut,
        settings.sigma_scale,
        sigma_maj,
        env.radiance.astype(np.float64),
        np.ascontiguousarray(rot),
        origin_local,
        dirs_local,
        settings.spp,
        settings.max_bounces,
        np.uint64(settings.seed & 0xFFFFFFFFFFFFFFFF),
        np.uint64(frame_id & 0xFFFFFFFFFFFFFFFF),
    )
    alpha = 1.0 - bg_count / settings.spp
    env_primary = env.sample(dirs_w)
    rgb = fg + (1.0 - alpha)[:, None] * env_primary

    ts = _kernels.first_hits(
        vol.data,
        np.asarray(vol.spacing, dtype=np.float64),
        size,
        alpha_lut,
        np.broadcast_to(origin_local, dirs_local.shape).copy(),
        dirs_local,
        settings.hit_alpha_threshold,
        march_step(vol),
    )
    depth = np.where(ts >= 0.0, np.clip(ts, cam.near, cam.far), 0.0)

    albedo = np.zeros((len(dirs_local), 3), dtype=np.float64)
    hit_mask = ts >= 0.0
    if hit_mask.any():
        hit_pos = origin_local + ts[hit_mask, None] * dirs_local[hit_mask]
        albedo[hit_mask] = _kernels.albedo_march(
            vol.data,
            np.asarray(vol.spacing, dtype=np.float64),
            size,
            alpha_lut,
            rgb_lut,
            np.ascontiguousarray(hit_pos),
            np.ascontiguousarray(dirs_local[hit_mask]),
            settings.albedo_march_steps,
            march_step(vol),
        )

    rgba = np.empty((h, w, 4), dtype=np.uint8)
    rgba[:, :, :3] = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).reshape(h, w, 3).astype(np.uint8)
    rgba[:, :, 3] = np.round(np.clip(alpha, 0.0, 1.0) * 255.0).reshape(h, w).astype(np.uint8)
    return FoveatedFrame(
        frame_id=frame_id,
        camera=cam,
        rgba=rgba,
        depth=depth.reshape(h, w).astype(np.float32),
        albedo=albedo.reshape(h, w, 3).astype(np.float32),
        timestamp_ms=timestamp_ms,
    )


def first_significant_hit(
    vol: Volume,
    tf: TransferFunction,
    origin,
    direction,
    threshold: float,
) -> Optional[tuple[np.ndarray, float]]:
    """March a single world-space ray; (world position, distance) of the first
    sample whose transfer alpha reaches ``threshold``, or None."""
    rot = _require_rigid(vol)
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    d = d / np.linalg.norm(d)
    alpha_lut, _ = _luts(tf)
    t = _kernels.first_hits(
        vol.data,
        np.asarray(vol.spacing, dtype=np.float64),
        vol.size_mm,
        alpha_lut,
        _to_local(vol, o),
        np.ascontiguousarray(d @ rot),
        threshold,
        march_step(vol),
    )[0]
    if t < 0.0:
        return None
    return o[0] + t * d[0], float(t)


def compute_albedo(vol: Volume, tf: TransferFunction, hit_position, direction, steps: int) -> np.ndarray:
    """Lighting-free surface color: transfer RGBA composited front-to-back
    over ``steps`` half-voxel steps from the hit point."""
    rot = _require_rigid(vol)
    p = np.asarray(hit_position, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    d = d / np.linalg.norm(d)
    alpha_lut, rgb_lut = _luts(tf)
    out = _kernels.albedo_march(
        vol.data,
        np.asarray(vol.spacing, dtype=np.float64),
        vol.size_mm,
        alpha_lut,
        rgb_lut,
        _to_local(vol, p),
        np.ascontiguousarray(d @ rot),
        steps,
        march_step(vol),
    )
    return out[0]


def generate_point_cloud(
    vol: Volume,
    tf: TransferFunction,
    env: EnvironmentMap,
    n_points: int,
    samples_per_point: int = 64,
    seed: int = 0,
    settings: RenderSettings | None = None,
) -> list[ColoredPoint]:
    """Surface-aligned colored points: rays cast inward from a bounding
    sphere, kept at their first significant hit, shaded by the path tracer.

    Casts exactly ``n_points`` rays, so low hit rates yield fewer points.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    settings = settings or RenderSettings()
    rot = _require_rigid(vol)
    rng = np.random.default_rng(seed)

    center = vol.size_mm * 0.5  # local
    radius = 0.75 * vol.diagonal
    dirs = rng.normal(size=(n_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = center + radius * dirs
    targets = rng.uniform(0.0, 1.0, size=(n_points, 3)) * vol.size_mm
    ray_d = targets - origins
    ray_d /= np.linalg.norm(ray_d, axis=1, keepdims=True)

    alpha_lut, rgb_lut = _luts(tf)
    ts = _kernels.first_hits(
        vol.data,
        np.asarray(vol.spacing, dtype=np.float64),
        vol.size_mm,
        alpha_lut,
        np.ascontiguousarray(origins),
        np.ascontiguousarray(ray_d),
        settings.hit_alpha_threshold,
        march_step(vol),
    )
    hit = ts >= 0.0
    if not hit.any():
        return []
    pos_local = origins[hit] + ts[hit, None] * ray_d[hit]
    sigma_maj = tf.max_alpha * settings.sigma_scale
    colors = _kernels.shade_points(
        vol.data,
        np.asarray(vol.spacing, dtype=np.float64),
        vol.size_mm,
        alpha_lut,
        rgb_lut,
        settings.sigma_scale,
        sigma_maj,
        env.radiance.astype(np.float64),
        np.ascontiguousarray(rot),
        np.ascontiguousarray(pos_local),
        samples_per_point,
        settings.max_bounces,
        np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
    )
    ph = np.concatenate([pos_local, np.ones((len(pos_local), 1))], axis=1)
    pos_world = (vol.world_transform @ ph.T).T[:, :3]
    dens = sample_density(vol, pos_world)
    alphas = tf.eval(dens)[:, 3]
    out = []
    for p, c, a in zip(pos_world, np.clip(colors, 0.0, 1.0), alphas):
        out.append(ColoredPoint(position=p, rgba=np.array([c[0], c[1], c[2], min(max(a, 1e-4), 1.0)])))
    return out


def points_to_arrays(points: list[ColoredPoint]) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
    rgba = np.array([p.rgba for p in points], dtype=np.float64).reshape(-1, 4)
    return pos, rgba


@dataclass
class DenoiseSettings:
    radius: int = 3
    sigma_px: float = 1.6
    sigma_albedo: float = 0.12
    sigma_depth: float = 0.08
    alpha_temporal: float = 0.8
    depth_agreement: float = 0.05


def denoise(
    frame: FoveatedFrame,
    history: Optional[FoveatedFrame] = None,
    settings: DenoiseSettings | None = None,
) -> FoveatedFrame:
    """Joint-bilateral filter guided by albedo and depth; with a history
    frame, blends reprojected history where depths agree within 5%."""
    settings = settings or DenoiseSettings()
    if history is not None and history.camera.resolution != frame.camera.resolution:
        raise ValueError("history resolution does not match frame")
    rgb = frame.rgb_f
    filtered = _kernels.guided_filter(
        np.ascontiguousarray(rgb),
        np.ascontiguousarray(frame.albedo.astype(np.float64)),
        np.ascontiguousarray(frame.depth.astype(np.float64)),
        settings.radius,
        settings.sigma_px,
        settings.sigma_albedo,
        settings.sigma_depth,
    )
    if history is not None:
        from .compositor import reproject

        warped = reproject(history, frame.camera, carry_depth=True)
        hist_rgb = warped.image[:, :, :3]
        hist_depth = warped.src_depth
        cur_depth = frame.depth.astype(np.float64)
        ok = (hist_depth > 0) & (cur_depth > 0)
        rel = np.zeros_like(cur_depth)
        np.divide(np.abs(hist_depth - cur_depth), cur_depth, out=rel, where=ok)
        blend = ok & (rel < settings.depth_agreement)
        a = settings.alpha_temporal
        filtered = np.where(blend[:, :, None], (1.0 - a) * filtered + a * hist_rgb, filtered)
    rgba = frame.rgba.copy()
    rgba[:, :, :3] = np.round(np.clip(filtered, 0.0, 1.0) * 255.0).astype(np.uint8)
    return replace(frame, rgba=rgba)

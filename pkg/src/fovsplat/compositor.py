"""Depth-guided reprojection of foveal frames and the hybrid composite.

The latest path-traced frame is projected onto a depth-deformed quad grid,
re-rendered under the current camera, and blended over the peripheral splat
render with a radial ramp; splats inside a downscaled foveal frustum are
discarded beforehand so transparent foveal regions don't double-expose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .camera import Camera
from .pathtracer import FoveatedFrame
from .rasterizer import RasterOutput, rasterize
from .splats import SplatModel
from .volume import EnvironmentMap


@dataclass
class CompositeSettings:
    blend_band: float = 0.15  # fraction of the foveal radius used for the ramp
    cutout_scale: float = 0.9
    foveation_center: tuple[float, float] = (0.5, 0.5)
    grid_res: int = 64
    disocclusion_ratio: float = 1.5
    depth_margin: float = 0.05  # relative slack behind the foveal depth surface

    def __post_init__(self):
        if not 0.0 < self.blend_band <= 0.5:
            raise ValueError("blend_band must lie in (0, 0.5]")
        if not 0.0 < self.cutout_scale < 1.0:
            raise ValueError("cutout_scale must lie in (0, 1)")
        if self.grid_res < 2:
            raise ValueError("grid_res must be >= 2")


@dataclass
class ReprojectionGrid:
    source_frame_id: int
    uvs: np.ndarray  # (G+1, G+1, 2)
    depths: np.ndarray  # (G+1, G+1), 0 where invalid
    valid: np.ndarray  # (G+1, G+1) bool
    world: np.ndarray  # (G+1, G+1, 3)


@dataclass
class ReprojectedFoveal:
    image: np.ndarray  # (H, W, 4) float, source colors where covered
    coverage: np.ndarray  # (H, W) float in {0, 1}
    camera: Camera
    source_camera: Camera
    source_frame_id: int
    dropped_triangles: int
    src_depth: Optional[np.ndarray] = None  # warped source depth, if requested


def reconstruct_world(cam_old: Camera, uv, d: float) -> Optional[np.ndarray]:
    """Invert the projection: a pixel's uv plus its linear world distance back
    to the world point (far-plane unprojection, then walk the view ray)."""
    if d <= 0.0:
        return None
    pv = cam_old.projection_matrix() @ cam_old.view_matrix()
    inv = np.linalg.inv(pv)
    ndc = np.array([2.0 * uv[0] - 1.0, 2.0 * uv[1] - 1.0, 1.0, 1.0])
    pf = inv @ ndc
    p_far = pf[:3] / pf[3]
    pos = cam_old.position
    ray = p_far - pos
    ray /= np.linalg.norm(ray)
    return pos + ray * d


def _reconstruct_world_batch(cam_old: Camera, uvs: np.ndarray, d: np.ndarray) -> np.ndarray:
    pv = cam_old.projection_matrix() @ cam_old.view_matrix()
    inv = np.linalg.inv(pv)
    flat_uv = uvs.reshape(-1, 2)
    ndc = np.concatenate(
        [2.0 * flat_uv - 1.0, np.ones((len(flat_uv), 2))], axis=1
    )
    pf = ndc @ inv.T
    p_far = pf[:, :3] / pf[:, 3:4]
    pos = cam_old.position
    ray = p_far - pos
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    out = pos + ray * d.reshape(-1, 1)
    return out.reshape(uvs.shape[:-1] + (3,))


def _sample_depth_at_uv(depth: np.ndarray, uvs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth at uv points; a vertex is valid only if every
    contributing texel has a hit (mixing hit/no-hit depths would invent
    geometry at silhouettes)."""
    h, w = depth.shape
    x = np.clip(uvs[..., 0] * w - 0.5, 0.0, w - 1.0)
    y = np.clip((1.0 - uvs[..., 1]) * h - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    d00 = depth[y0, x0]
    d01 = depth[y0, x1]
    d10 = depth[y1, x0]
    d11 = depth[y1, x1]
    val = (
        d00 * (1 - fx) * (1 - fy) + d01 * fx * (1 - fy) + d10 * (1 - fx) * fy + d11 * fx * fy
    )
    valid = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    return val, valid


def build_reprojection_grid(frame: FoveatedFrame, grid_res: int = 64) -> ReprojectionGrid:
    g = grid_res
    lin = np.linspace(0.0, 1.0, g + 1)
    u, v = np.meshgrid(lin, lin)
    v = v[::-1]  # row 0 = top of image = v near 1
    uvs = np.stack([u, v], axis=-1)
    depths, valid = _sample_depth_at_uv(frame.depth.astype(np.float64), uvs)
    depths = np.where(valid, depths, 0.0)
    world = _reconstruct_world_batch(frame.camera, uvs, np.maximum(depths, 1e-9))
    return ReprojectionGrid(
        source_frame_id=frame.frame_id, uvs=uvs, depths=depths, valid=valid, world=world
    )


def reproject(
    frame: FoveatedFrame,
    cam_new: Camera,
    settings: CompositeSettings | None = None,
    carry_depth: bool = False,
) -> ReprojectedFoveal:
    """Warp the foveal frame into ``cam_new`` via its depth-deformed grid.

    Triangles touching no-hit vertices are skipped and triangles stretched
    past the disocclusion edge-depth-ratio threshold are dropped, leaving
    those pixels to the peripheral model.
    """
    settings = settings or CompositeSettings()
    grid = build_reprojection_grid(frame, settings.grid_res)

    pv = cam_new.projection_matrix() @ cam_new.view_matrix()
    gshape = grid.world.shape[:2]
    wpts = grid.world.reshape(-1, 3)
    ph = np.concatenate([wpts, np.ones((len(wpts), 1))], axis=1)
    clip = ph @ pv.T
    wclip = clip[:, 3]
    in_front = wclip > cam_new.near * 1e-3
    ndc = clip[:, :2] / np.where(np.abs(wclip[:, None]) < 1e-12, 1e-12, wclip[:, None])
    wd, hd = cam_new.resolution
    px = (ndc[:, 0] + 1.0) / 2.0 * wd
    py = (1.0 - (ndc[:, 1] + 1.0) / 2.0) * hd
    verts_px = np.stack([px, py], axis=1).reshape(gshape + (2,))
    verts_z = wclip.reshape(gshape)
    valid = (grid.valid & in_front.reshape(gshape)).astype(np.uint8)

    src = frame.rgba.astype(np.float64) / 255.0
    if carry_depth:
        src = np.concatenate([src, frame.depth.astype(np.float64)[:, :, None]], axis=2)

    out, zbuf, dropped = _kernels.warp_grid(
        np.ascontiguousarray(verts_px),
        np.ascontiguousarray(verts_z),
        np.ascontiguousarray(grid.depths),
        np.ascontiguousarray(valid),
        np.ascontiguousarray(grid.uvs),
        np.ascontiguousarray(src),
        wd,
        hd,
        settings.disocclusion_ratio,
    )
    coverage = (zbuf < 1e29).astype(np.float64)
    return ReprojectedFoveal(
        image=out[:, :, :4],
        coverage=coverage,
        camera=cam_new,
        source_camera=frame.camera,
        source_frame_id=frame.frame_id,
        dropped_triangles=int(dropped),
        src_depth=out[:, :, 4] if carry_depth else None,
    )


def radial_blend_weights(display_cam: Camera, foveal_cam: Camera, settings: CompositeSettings) -> np.ndarray:
    """Per-display-pixel foveal weight: 1 inside (1 - blend_band) of the
    foveal half-angle, linear ramp to 0 at the foveal extent."""
    uvs = display_cam.pixel_center_uvs()
    _, dirs = display_cam.rays_for_uv(uvs)
    axis = foveal_cam.forward
    cosang = np.clip(dirs @ axis, -1.0, 1.0)
    ang = np.arccos(cosang)
    theta_f = math.radians(foveal_cam.fov_deg) / 2.0
    inner = (1.0 - settings.blend_band) * theta_f
    wgt = np.clip((theta_f - ang) / max(theta_f - inner, 1e-9), 0.0, 1.0)
    w, h = display_cam.resolution
    return wgt.reshape(h, w)


def cutout_gaussians(
    model: SplatModel,
    foveal_cam: Camera,
    foveal_depth: Optional[np.ndarray],
    settings: CompositeSettings | None = None,
) -> SplatModel:
    """Drop Gaussians whose means fall inside the downscaled foveal frustum,
    bounded by the foveal depth surface plus a relative margin (means beyond
    an opaque surface are occluded anyway and are kept)."""
    settings = settings or CompositeSettings()
    if len(model) == 0:
        return model
    pv = foveal_cam.projection_matrix() @ foveal_cam.view_matrix()
    ph = np.concatenate([model.positions, np.ones((len(model), 1))], axis=1)
    clip = ph @ pv.T
    w = clip[:, 3]
    front = w > 0
    ndc = clip[:, :2] / np.where(np.abs(w[:, None]) < 1e-12, 1e-12, w[:, None])
    inside = front & (np.abs(ndc[:, 0]) <= settings.cutout_scale) & (np.abs(ndc[:, 1]) <= settings.cutout_scale)
    if foveal_depth is not None and inside.any():
        dist = np.linalg.norm(model.positions - foveal_cam.position, axis=1)
        hh, ww = foveal_depth.shape
        u = (ndc[:, 0] + 1.0) / 2.0
        v = (ndc[:, 1] + 1.0) / 2.0
        xi = np.clip((u * ww).astype(np.int64), 0, ww - 1)
        yi = np.clip(((1.0 - v) * hh).astype(np.int64), 0, hh - 1)
        surf = foveal_depth[yi, xi]
        behind_surface = (surf > 0) & (dist > surf * (1.0 + settings.depth_margin))
        inside &= ~behind_surface
    keep = ~inside
    return SplatModel(
        positions=model.positions[keep],
        log_scales=model.log_scales[keep],
        rotations=model.rotations[keep],
        opacity_logits=model.opacity_logits[keep],
        rgbs=model.rgbs[keep],
        generation=model.generation,
        settings_hash=model.settings_hash,
    )


def composite(
    peripheral: RasterOutput,
    foveal: ReprojectedFoveal,
    settings: CompositeSettings,
    display_cam: Camera,
) -> np.ndarray:
    """Blend the warped foveal layer over the peripheral render.

    Foveal weight = radial ramp x warp coverage, so disocclusion holes fall
    back to the peripheral layer; weights sum to 1 at every pixel.
    """
    w, h = display_cam.resolution
    if peripheral.rgb.shape != (h, w, 3):
        raise ValueError("peripheral raster does not match the display camera")
    if foveal.camera.resolution != (w, h) or not np.allclose(foveal.camera.pose, display_cam.pose, atol=1e-9):
        raise ValueError("foveal raster was reprojected for a different camera")
    ramp = radial_blend_weights(display_cam, foveal.source_camera, settings)
    wf = ramp * foveal.coverage
    out = np.empty((h, w, 4), dtype=np.float64)
    out[:, :, :3] = wf[:, :, None] * foveal.image[:, :, :3] + (1.0 - wf)[:, :, None] * peripheral.rgb
    out[:, :, 3] = wf * foveal.image[:, :, 3] + (1.0 - wf) * peripheral.alpha
    return out


def render_peripheral(
    model: SplatModel, cam: Camera, env: Optional[EnvironmentMap] = None
) -> RasterOutput:
    """Splat render with the environment map (if any) behind it."""
    out = rasterize(model, cam, (0.0, 0.0, 0.0))
    if env is not None:
        uvs = cam.pixel_center_uvs()
        _, dirs = cam.rays_for_uv(uvs)
        w, h = cam.resolution
        bg = env.sample(dirs).reshape(h, w, 3)
        out = RasterOutput(
            rgb=out.rgb + (1.0 - out.alpha)[:, :, None] * bg,
            alpha=out.alpha,
            max_blend_weight=out.max_blend_weight,
        )
    return out


def render_display_frame(
    model: SplatModel,
    frame: FoveatedFrame,
    display_cam: Camera,
    env: Optional[EnvironmentMap] = None,
    settings: CompositeSettings | None = None,
) -> np.ndarray:
    """Full hybrid composite: cutout, peripheral render, reprojection, blend."""
    settings = settings or CompositeSettings()
    cut = cutout_gaussians(model, frame.camera, frame.depth, settings)
    if len(cut) == 0:
        w, h = display_cam.resolution
        peripheral = RasterOutput(
            rgb=np.zeros((h, w, 3)), alpha=np.zeros((h, w)), max_blend_weight=np.zeros(0)
        )
        if env is not None:
            uvs = display_cam.pixel_center_uvs()
            _, dirs = display_cam.rays_for_uv(uvs)
            peripheral.rgb[:] = env.sample(dirs).reshape(h, w, 3)
    else:
        peripheral = render_peripheral(cut, display_cam, env)
    warped = reproject(frame, display_cam, settings)
    return composite(peripheral, warped, settings, display_cam)


@dataclass
class FrameSchedule:
    reuse_factor: int


def select_latency_mode(target_frame_ms: float, measured_render_ms: float) -> FrameSchedule:
    """How many display frames reuse each foveal frame; the display loop
    never blocks on the tracer."""
    if target_frame_ms <= 0:
        raise ValueError("target frame time must be positive")
    reuse = max(1, int(math.ceil(max(measured_render_ms, 0.0) / target_frame_ms)))
    return FrameSchedule(reuse_factor=reuse)

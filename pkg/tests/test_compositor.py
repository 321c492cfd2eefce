import numpy as np
import pytest

import fovsplat as fs
from fovsplat.compositor import (
    CompositeSettings,
    build_reprojection_grid,
    radial_blend_weights,
    reconstruct_world,
    reproject,
    select_latency_mode,
)
from fovsplat.pathtracer import RenderSettings
from fovsplat.rasterizer import RasterOutput
from fovsplat.splats import logit

WALL_TF = fs.TransferFunction.from_points(
    [(0.0, (0, 0, 0, 0)), (0.5, (0.7, 0.55, 0.4, 0.0)), (1.0, (0.7, 0.55, 0.4, 1.0))]
)


@pytest.fixture(scope="module")
def wall_frame(wall_vol, grad_env):
    diag = wall_vol.diagonal
    cam = fs.look_at((0, 0, 1.2 * diag), (0, 0, 0), fov_deg=20, resolution=(128, 128), near=0.5, far=6 * diag)
    frame = fs.render(wall_vol, WALL_TF, grad_env, cam, RenderSettings(spp=32, seed=4, sigma_scale=0.5), frame_id=1)
    return fs.denoise(frame)


def test_reconstruct_world_on_axis():
    cam = fs.look_at((0, 0, 0), (0, 0, -10), fov_deg=40, resolution=(64, 64), near=0.1, far=100)
    p = reconstruct_world(cam, (0.5, 0.5), 5.0)
    assert p == pytest.approx([0.0, 0.0, -5.0], abs=1e-9)


def test_reconstruct_world_far_plane_center():
    cam = fs.look_at((2, 1, 3), (2, 1, -10), fov_deg=30, resolution=(32, 32), near=0.5, far=80.0)
    p = reconstruct_world(cam, (0.5, 0.5), 80.0)
    assert p == pytest.approx([2.0, 1.0, 3.0 - 80.0], abs=1e-6)


def test_reconstruct_world_nonpositive_depth_is_sentinel():
    cam = fs.look_at((0, 0, 0), (0, 0, -1), fov_deg=40, resolution=(8, 8), near=0.1, far=10)
    assert reconstruct_world(cam, (0.3, 0.7), 0.0) is None
    assert reconstruct_world(cam, (0.3, 0.7), -1.0) is None


def test_reconstruct_project_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(20):
        eye = rng.normal(0, 5, 3)
        target = eye + rng.normal(0, 1, 3) * [1, 1, 4] + [0, 0, -6]
        cam = fs.look_at(eye, target, fov_deg=rng.uniform(20, 70), resolution=(64, 64), near=0.2, far=500)
        uv = rng.uniform(0.05, 0.95, 2)
        d = rng.uniform(1.0, 80.0)
        p = reconstruct_world(cam, uv, d)
        uv2, d2 = cam.project(p)
        assert np.allclose(uv2[0], uv, atol=1e-4)
        assert d2[0] == pytest.approx(d, abs=1e-4)


def test_identity_reprojection_reproduces_frame(wall_frame):
    warped = reproject(wall_frame, wall_frame.camera)
    src = wall_frame.rgba.astype(np.float64) / 255.0
    pred = np.concatenate(
        [warped.image[:, :, :3], (warped.image[:, :, 3] * warped.coverage)[:, :, None]], axis=2
    )
    assert fs.masked_psnr(pred, src) >= 40.0
    assert warped.dropped_triangles == 0


def test_reprojection_grid_covers_unit_square(wall_frame):
    grid = build_reprojection_grid(wall_frame, 16)
    assert grid.uvs[:, :, 0].min() == 0.0 and grid.uvs[:, :, 0].max() == 1.0
    assert grid.uvs[:, :, 1].min() == 0.0 and grid.uvs[:, :, 1].max() == 1.0
    # world positions obey the reconstruction equation where valid
    v = grid.valid
    recon = np.array(
        [
            reconstruct_world(wall_frame.camera, grid.uvs[i, j], grid.depths[i, j])
            for i, j in zip(*np.nonzero(v))
        ]
    )
    assert np.allclose(recon, grid.world[v], atol=1e-9)


def _two_plane_frame(res=96):
    # synthetic frame: red square at depth 20 over a gray plane at depth 50
    cam = fs.look_at((0, 0, 0), (0, 0, -1), fov_deg=40, resolution=(res, res), near=0.5, far=200)
    rgba = np.zeros((res, res, 4), dtype=np.uint8)
    rgba[:, :, :3] = 128
    rgba[:, :, 3] = 255
    depth = np.full((res, res), 50.0, dtype=np.float32)
    third = res // 3
    rgba[third : 2 * third, third : 2 * third, 0] = 255
    rgba[third : 2 * third, third : 2 * third, 1:3] = 0
    depth[third : 2 * third, third : 2 * third] = 20.0
    return fs.FoveatedFrame(
        frame_id=1, camera=cam, rgba=rgba, depth=depth, albedo=np.zeros((res, res, 3), dtype=np.float32)
    )


def test_translation_toward_scene_magnifies_and_discloses():
    frame = _two_plane_frame()
    cam = frame.camera

    def red_area(warped):
        img = warped.image
        return int(((img[:, :, 0] > 0.7) & (img[:, :, 1] < 0.3) & (warped.coverage > 0)).sum())

    identity = reproject(frame, cam)
    pose = cam.pose.copy()
    pose[:3, 3] += cam.forward * 8.0
    closer = fs.Camera(pose=pose, fov_deg=cam.fov_deg, resolution=cam.resolution, near=cam.near, far=cam.far)
    warped = reproject(frame, closer)
    assert red_area(warped) > red_area(identity)  # foreground magnifies
    assert warped.dropped_triangles > 0  # square silhouette is a rubber sheet

    # lateral motion opens a true hole behind the square (content never seen)
    pose = cam.pose.copy()
    pose[:3, 3] += cam.pose[:3, 0] * 6.0
    lateral = fs.Camera(pose=pose, fov_deg=cam.fov_deg, resolution=cam.resolution, near=cam.near, far=cam.far)
    sideways = reproject(frame, lateral)
    assert (sideways.coverage == 0).mean() > (identity.coverage == 0).mean()


def test_disocclusion_grows_with_translation(sphere_vol, grad_env):
    tf = fs.TransferFunction.from_points(
        [(0.0, (0, 0, 0, 0)), (0.5, (0.9, 0.4, 0.2, 0.0)), (1.0, (0.9, 0.4, 0.2, 1.0))]
    )
    diag = sphere_vol.diagonal
    cam = fs.look_at((0, 0, 1.1 * diag), (0, 0, 0), fov_deg=25, resolution=(96, 96), near=0.5, far=6 * diag)
    frame = fs.denoise(fs.render(sphere_vol, tf, grad_env, cam, RenderSettings(spp=16, seed=2, sigma_scale=0.5)))
    uncovered = []
    for shift in (0.0, 8.0, 16.0):
        pose = cam.pose.copy()
        pose[:3, 3] += pose[:3, 0] * shift  # slide sideways
        cam2 = fs.Camera(pose=pose, fov_deg=cam.fov_deg, resolution=cam.resolution, near=cam.near, far=cam.far)
        warped = reproject(frame, cam2)
        mask = frame.depth > 0
        uncovered.append(float((warped.coverage == 0).mean()))
    assert uncovered[0] <= uncovered[1] <= uncovered[2]


def test_blend_weights_center_one_edge_zero():
    display = fs.look_at((0, 0, 100), (0, 0, 0), fov_deg=60, resolution=(64, 64), near=1, far=500)
    foveal = fs.look_at((0, 0, 100), (0, 0, 0), fov_deg=20, resolution=(32, 32), near=1, far=500)
    w = radial_blend_weights(display, foveal, CompositeSettings(blend_band=0.15))
    assert w[32, 32] == 1.0
    assert w[0, 0] == 0.0
    assert np.all((w >= 0) & (w <= 1))


def test_composite_center_is_foveal_outside_is_peripheral(wall_frame):
    cam = wall_frame.camera
    display = fs.Camera(pose=cam.pose, fov_deg=70.0, resolution=(96, 96), near=cam.near, far=cam.far)
    warped = reproject(wall_frame, display)
    h, w = 96, 96
    peripheral = RasterOutput(
        rgb=np.full((h, w, 3), 0.123), alpha=np.ones((h, w)), max_blend_weight=np.zeros(1)
    )
    out = fs.composite(peripheral, warped, CompositeSettings(), display)
    # center: fully foveal (warped frame content)
    assert warped.coverage[48, 48] == 1.0
    src_center = wall_frame.rgba[64, 64, :3] / 255.0
    assert out[48, 48, :3] == pytest.approx(src_center, abs=0.05)
    # corner: outside the foveal extent -> peripheral
    assert out[0, 0, :3] == pytest.approx([0.123, 0.123, 0.123], abs=1e-9)


def test_composite_camera_mismatch_raises(wall_frame):
    cam = wall_frame.camera
    display = fs.Camera(pose=cam.pose, fov_deg=70.0, resolution=(96, 96), near=cam.near, far=cam.far)
    warped = reproject(wall_frame, display)
    peripheral = RasterOutput(rgb=np.zeros((96, 96, 3)), alpha=np.zeros((96, 96)), max_blend_weight=np.zeros(1))
    other = fs.look_at((5, 5, 5), (0, 0, 0), fov_deg=70, resolution=(96, 96), near=1, far=500)
    with pytest.raises(ValueError):
        fs.composite(peripheral, warped, CompositeSettings(), other)
    bad_res = RasterOutput(rgb=np.zeros((32, 32, 3)), alpha=np.zeros((32, 32)), max_blend_weight=np.zeros(1))
    with pytest.raises(ValueError):
        fs.composite(bad_res, warped, CompositeSettings(), display)


def test_cutout_removes_intruding_gaussian(wall_frame):
    cam = wall_frame.camera
    wall_depth = float(np.median(wall_frame.depth[wall_frame.depth > 0]))
    inside_pos = cam.position + cam.forward * (wall_depth * 0.5)
    outside_dir = cam.pose[:3, 0]  # off to the side, outside the frustum
    outside_pos = cam.position + cam.forward * (wall_depth * 0.5) + outside_dir * (wall_depth * 2.0)
    behind_pos = cam.position + cam.forward * (wall_depth * 1.5)
    model = fs.SplatModel(
        positions=np.array([inside_pos, outside_pos, behind_pos]),
        log_scales=np.zeros((3, 3)),
        rotations=np.tile([1.0, 0, 0, 0], (3, 1)),
        opacity_logits=np.full(3, 2.0),
        rgbs=np.full((3, 3), 0.5),
    )
    cut = fs.cutout_gaussians(model, cam, wall_frame.depth, CompositeSettings())
    assert len(cut) == 2
    assert not any(np.allclose(p, inside_pos) for p in cut.positions)
    # the mean behind the opaque wall surface stays
    assert any(np.allclose(p, behind_pos) for p in cut.positions)


def test_display_pipeline_drops_cutout_gaussian(wall_frame, grad_env):
    cam = wall_frame.camera
    wall_depth = float(np.median(wall_frame.depth[wall_frame.depth > 0]))
    intruder = cam.position + cam.forward * (wall_depth * 0.5)
    model = fs.SplatModel(
        positions=np.array([intruder]),
        log_scales=np.full((1, 3), np.log(6.0)),
        rotations=np.array([[1.0, 0, 0, 0]]),
        opacity_logits=np.array([14.0]),
        rgbs=np.array([[0.0, 1.0, 0.0]]),
    )
    display = fs.Camera(pose=cam.pose, fov_deg=70.0, resolution=(96, 96), near=cam.near, far=cam.far)
    out = fs.render_display_frame(model, wall_frame, display, grad_env, CompositeSettings())
    # a bright green splat in front of the wall would dominate the center
    assert out[48, 48, 1] < 0.6


def test_latency_schedule():
    assert select_latency_mode(13.9, 17.0).reuse_factor == 2
    assert select_latency_mode(13.9, 5.0).reuse_factor == 1
    assert select_latency_mode(13.9, 139.0).reuse_factor == 10


def test_latency_schedule_simulated_clock():
    # simulated display loop: render spikes change reuse, never the cadence
    target = 10.0
    now = 0.0
    display_ticks = []
    render_times = [8.0, 8.0, 80.0, 80.0, 8.0]
    frame_available_at = 0.0
    for k in range(50):
        now = k * target
        display_ticks.append(now)
        render_ms = render_times[min(k // 10, 4)]
        schedule = select_latency_mode(target, render_ms)
        assert schedule.reuse_factor == max(1, int(np.ceil(render_ms / target)))
    assert np.allclose(np.diff(display_ticks), target)


def test_composite_settings_validation():
    with pytest.raises(ValueError):
        CompositeSettings(blend_band=0.0)
    with pytest.raises(ValueError):
        CompositeSettings(cutout_scale=1.5)
    with pytest.raises(ValueError):
        select_latency_mode(0.0, 5.0)

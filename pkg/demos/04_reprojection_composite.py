"""Depth-guided reprojection and the hybrid composite.

Warps a stale foveal frame to a moved camera using its depth buffer, then
assembles the full display image: frustum cutout, peripheral splat render,
radial edge blend.
"""

import os

import numpy as np

import fovsplat as fs
from fovsplat.compositor import CompositeSettings, reproject
from fovsplat.frameio import save_png
from fovsplat.training import train_view_from_frame

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

vol = fs.make_procedural_volume("sphere", (64, 64, 64))
tf = fs.TransferFunction.from_points(
    [(0.0, (0, 0, 0, 0)), (0.3, (0.8, 0.5, 0.3, 0.05)), (0.7, (0.9, 0.4, 0.25, 0.6)), (1.0, (0.95, 0.9, 0.85, 1.0))]
)
env = fs.EnvironmentMap.vertical_gradient((1, 1, 1), (0.4, 0.45, 0.55))
diag = vol.diagonal

foveal_cam = fs.look_at((0, 0.2 * diag, 1.2 * diag), (0, 0, 0), fov_deg=20,
                        resolution=(192, 192), near=0.5, far=6 * diag)
frame = fs.denoise(fs.render(vol, tf, env, foveal_cam, fs.RenderSettings(spp=16, seed=4)))

# yaw the head 2 degrees: the stale frame is warped through its depth mesh
moved = fs.yaw_camera(foveal_cam, 2.0)
warped = reproject(frame, moved)
fresh = fs.denoise(fs.render(vol, tf, env, moved, fs.RenderSettings(spp=16, seed=4), frame_id=1))
pred = np.concatenate([warped.image[:, :, :3], (warped.image[:, :, 3] * warped.coverage)[:, :, None]], axis=2)
ref = np.concatenate([fresh.rgb_f, fresh.alpha_f[:, :, None]], axis=2)
print(f"2-degree yaw: warped vs re-rendered MPSNR {fs.masked_psnr(pred, ref):.1f} dB, "
      f"{warped.dropped_triangles} disocclusion triangles dropped")
save_png(warped.image, os.path.join(OUT, "warped_frame.png"))

# quick peripheral model for the composite
views = [
    train_view_from_frame(
        fs.denoise(fs.render(vol, tf, env, c, fs.RenderSettings(spp=8, seed=11), frame_id=i)), env
    )
    for i, c in enumerate(
        fs.fibonacci_sphere_cameras((0, 0, 0), 1.5 * diag, 12, fov_deg=30, resolution=(96, 96), near=0.5, far=6 * diag)
    )
]
points = fs.generate_point_cloud(vol, tf, env, 8000, 16, seed=5)
model = fs.initialize_model(points, views, fs.TrainConfig(total_iters=300, simplify_at=60, target_gaussians=5000, seed=3))
model = fs.apply_viewer_boost(model, 1.1, 1.1)

# display camera is wider than the foveal one; the composite places the
# warped path-traced image in the middle of the splat render
display = fs.Camera(pose=moved.pose, fov_deg=60.0, resolution=(256, 256), near=moved.near, far=moved.far)
display_img = fs.render_display_frame(model, frame, display, env, CompositeSettings())
save_png(display_img, os.path.join(OUT, "hybrid_composite.png"))

periph_only = fs.render_peripheral(model, display, env)
save_png(np.concatenate([np.clip(periph_only.rgb, 0, 1), display_img[:, :, :3]], axis=1),
         os.path.join(OUT, "peripheral_vs_hybrid.png"))
print("wrote", os.path.join(OUT, "hybrid_composite.png"))

# latency scheduling: how many display ticks each foveal frame covers
for render_ms in (5.0, 17.0, 120.0):
    print(f"render {render_ms:5.1f} ms at 72 Hz -> reuse factor "
          f"{fs.select_latency_mode(13.9, render_ms).reuse_factor}")

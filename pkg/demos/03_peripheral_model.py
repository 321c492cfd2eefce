"""Peripheral model lifecycle: seed, abbreviated training, refinement.

Seeds Gaussians from the surface point cloud, runs the fast initialization
(simplification early, no densification), then refines with extra close-up
views and reports held-out quality and wire size at each stage.
"""

import os
import time

import numpy as np

import fovsplat as fs
from fovsplat.frameio import save_png
from fovsplat.training import model_view_mpsnr, seed_from_points, train_view_from_frame

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

vol = fs.make_procedural_volume("sphere", (64, 64, 64))
tf = fs.TransferFunction.from_points(
    [(0.0, (0, 0, 0, 0)), (0.3, (0.8, 0.5, 0.3, 0.05)), (0.7, (0.9, 0.4, 0.25, 0.6)), (1.0, (0.95, 0.9, 0.85, 1.0))]
)
env = fs.EnvironmentMap.vertical_gradient((1, 1, 1), (0.4, 0.45, 0.55))
diag = vol.diagonal


def make_views(cams, spp, seed, source="initial"):
    out = []
    for i, c in enumerate(cams):
        frame = fs.denoise(fs.render(vol, tf, env, c, fs.RenderSettings(spp=spp, seed=seed), frame_id=seed * 100 + i))
        out.append(train_view_from_frame(frame, env, source))
    return out


# normal-quality preset: 12 views at 8 spp
train_views = make_views(
    fs.fibonacci_sphere_cameras((0, 0, 0), 1.5 * diag, 12, fov_deg=30, resolution=(128, 128), near=0.5, far=6 * diag),
    spp=8, seed=11,
)
holdout = make_views(
    fs.orbit_cameras((0, 0, 0), 1.5 * diag, 4, fov_deg=30, resolution=(128, 128), near=0.5, far=6 * diag, elevation_deg=33),
    spp=32, seed=12,
)
points = fs.generate_point_cloud(vol, tf, env, 20000, 64, seed=5)


def holdout_quality(model):
    return float(np.mean([model_view_mpsnr(model, v) for v in holdout]))


seeded = seed_from_points(points).to_model(0, 0)
print(f"seeded point splats: {len(seeded)} gaussians, held-out MPSNR {holdout_quality(seeded):.2f} dB")

t0 = time.time()
cfg = fs.TrainConfig(total_iters=700, simplify_at=95, target_gaussians=10000, seed=3)
model = fs.initialize_model(points, train_views, cfg, settings_hash=1)
print(f"initialized in {time.time() - t0:.0f} s: {len(model)} gaussians, "
      f"held-out {holdout_quality(model):.2f} dB")

blob = fs.serialize(model)
print(f"wire size: {len(blob) / 1024:.0f} KB (quantized)")

# refinement with 64 closer-up views; generation bumps, settings hash sticks
extra = make_views(
    fs.fibonacci_sphere_cameras((0, 0, 0), 1.0 * diag, 64, fov_deg=20, resolution=(128, 128), near=0.5, far=6 * diag),
    spp=4, seed=21, source="foveal",
)
t0 = time.time()
rcfg = fs.TrainConfig(total_iters=2000, simplify_at=95, densify_from=500, densify_until=900, seed=9)
refined = fs.refine_model(model, train_views + extra, rcfg, settings_hash=1)
print(f"refined in {time.time() - t0:.0f} s: {len(refined)} gaussians (gen {refined.generation}), "
      f"held-out {holdout_quality(refined):.2f} dB")

# side-by-side render of seeded vs initialized vs refined on a held-out view
cam = holdout[0].camera
strips = []
for m in (seeded, model, refined):
    out = fs.rasterize(m, cam, (0.05, 0.05, 0.08))
    strips.append(np.clip(out.rgb, 0, 1))
save_png(np.concatenate(strips, axis=1), os.path.join(OUT, "model_stages.png"))
print("wrote", os.path.join(OUT, "model_stages.png"))

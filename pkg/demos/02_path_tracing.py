"""Path tracing foveal frames.

Renders posed RGBA+depth frames with the delta-tracking path tracer, applies
the guided denoiser, verifies the Beer-Lambert law on a homogeneous medium,
and exports PNG + raw depth fixtures.
"""

import os
import time

import numpy as np

import fovsplat as fs
from fovsplat.frameio import export_frame

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

vol = fs.make_procedural_volume("tubes", (64, 64, 64))
tf = fs.TransferFunction.from_points(
    [(0.0, (0, 0, 0, 0)), (0.3, (0.8, 0.5, 0.3, 0.05)), (0.7, (0.9, 0.4, 0.25, 0.6)), (1.0, (0.95, 0.9, 0.85, 1.0))]
)
env = fs.EnvironmentMap.vertical_gradient((1, 1, 1), (0.4, 0.45, 0.55))

diag = vol.diagonal
cam = fs.look_at((0.4 * diag, 0.5 * diag, 1.1 * diag), (0, 0, 0), fov_deg=25,
                 resolution=(256, 256), near=0.5, far=6 * diag)

for spp in (2, 8, 32):
    t0 = time.time()
    frame = fs.render(vol, tf, env, cam, fs.RenderSettings(spp=spp, seed=7))
    print(f"spp={spp:3d}: {1000 * (time.time() - t0):6.0f} ms, "
          f"hit coverage {float((frame.depth > 0).mean()):.2f}")
    export_frame(frame, os.path.join(OUT, f"tubes_spp{spp}.png"))

# The denoiser is guided by the albedo and depth buffers the tracer already
# produces; with a history frame it accumulates temporally where depth agrees.
noisy = fs.render(vol, tf, env, cam, fs.RenderSettings(spp=4, seed=7), frame_id=0)
clean = fs.denoise(noisy)
accum = fs.denoise(fs.render(vol, tf, env, cam, fs.RenderSettings(spp=4, seed=7), frame_id=1), clean)
export_frame(accum, os.path.join(OUT, "tubes_denoised.png"), os.path.join(OUT, "tubes_depth.raw"))

# Transmittance sanity: a homogeneous box of optical depth 1 transmits e^-1.
box = fs.make_procedural_volume("homogeneous", (32, 32, 32), sigma=0.8)
absorb = fs.TransferFunction.from_points([(0.0, (0, 0, 0, 0)), (1.0, (0, 0, 0, 1))])
white = fs.EnvironmentMap.uniform((1, 1, 1))
probe = fs.look_at((0, 0, 40), (0, 0, 0), fov_deg=4, resolution=(3, 3), near=0.5, far=200)
settings = fs.RenderSettings(spp=1024, seed=3, sigma_scale=1.0 / (0.8 * 32.0))
frame = fs.render(box, absorb, white, probe, settings)
print(f"transmittance: measured {1 - frame.alpha_f.mean():.4f} vs exp(-1) = {np.exp(-1):.4f}")

# The surface-aligned point cloud that seeds the peripheral model.
points = fs.generate_point_cloud(vol, tf, env, 20000, 64, seed=5)
pos = np.array([p.position for p in points])
print(f"point cloud: {len(points)} surface points, bbox "
      f"{np.round(pos.min(0), 1)} .. {np.round(pos.max(0), 1)}")

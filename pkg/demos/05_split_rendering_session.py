"""Split rendering over the loopback interface.

Runs the real TCP server, drives it like a viewer would (settings change,
pose requests, model pushes), and finishes with the scripted benchmark
producing a machine-readable report.
"""

import json
import os

import numpy as np

import fovsplat as fs
from fovsplat import protocol as proto
from fovsplat.server import SessionConfig, SocketServer, run_benchmark_session, report_to_json

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

vol = fs.make_procedural_volume("sphere", (48, 48, 48))
tf = fs.TransferFunction.from_points(
    [(0.0, (0, 0, 0, 0)), (0.4, (0.9, 0.4, 0.2, 0.1)), (1.0, (0.95, 0.9, 0.8, 1.0))]
)
env = fs.EnvironmentMap.uniform((1.0, 1.0, 1.0))
cfg = SessionConfig(view_resolution=(64, 64), n_points=5000, point_samples=16,
                    init_iters=200, refine_iters=150, target_gaussians=3000,
                    refine_trigger=6, seed=1)

server = SocketServer(vol, env, cfg, port=0)
server.start()
print(f"server on 127.0.0.1:{server.port}")

conn = proto.Connection.connect("127.0.0.1", server.port, timeout=300.0)
models = []

# 1) settings change: the server renders the initial views, seeds the point
#    cloud, trains generation 1, and pushes it before acknowledging
conn.send(proto.RenderSettingsMessage(0, tf.to_json().encode(), np.zeros((0, 4)), 0))
while True:
    msg = conn.recv(timeout=300.0)
    if isinstance(msg, proto.SplatModelMessage):
        models.append(fs.deserialize(msg.blob))
        print(f"  pushed model: generation {models[-1].generation}, {len(models[-1])} gaussians")
    elif isinstance(msg, proto.SettingsAck):
        print(f"  settings acked, hash {msg.settings_hash:#x}")
        break

# 2) interactive loop: pose request -> foveated frame; novel views feed the
#    trainer, and a refinement push arrives once enough accumulate
diag = vol.diagonal
for k in range(14):
    a = np.radians(k * 24.0)
    eye = vol.center_world + 1.4 * diag * np.array([np.sin(a), 0.3, np.cos(a)])
    cam = fs.look_at(eye, vol.center_world, fov_deg=20, resolution=(64, 64), near=0.5, far=6 * diag)
    reply = proto.request_frame(
        conn, proto.PoseRequest(k + 1, cam.pose, 20.0, (64, 64), 2),
        timeout=300.0, on_model=lambda m: models.append(fs.deserialize(m.blob)),
    )
    if k % 4 == 0:
        print(f"  frame {reply.frame_id}: {reply.render_ms:.0f} ms server-side")

import time

deadline = time.time() + 120
while len(models) < 2 and time.time() < deadline:
    try:
        msg = conn.recv(timeout=2.0)
    except proto.TransportError:
        continue
    if isinstance(msg, proto.SplatModelMessage):
        models.append(fs.deserialize(msg.blob))
print("model generations seen:", [m.generation for m in models])
conn.close()
server.stop()

# 3) scripted benchmark: orbit path, masked metrics vs ground truth
orbit = fs.orbit_cameras(vol.center_world, 1.4 * diag, 8, fov_deg=20, resolution=(64, 64),
                         near=0.5, far=6 * diag, elevation_deg=20)
path = [{"pose": c.pose.reshape(16).tolist(), "fov": 20.0} for c in orbit]
report = run_benchmark_session(vol, tf, path, env=env, session_config=cfg,
                               display_resolution=(128, 128), display_fov_deg=60.0,
                               foveal_resolution=(64, 64), foveal_fov_deg=20.0, gt_spp=16)
out_path = os.path.join(OUT, "benchmark_report.json")
with open(out_path, "w") as fh:
    fh.write(report_to_json(report))
s = report["summary"]
print(f"benchmark: foveal MPSNR p50 {s['foveal_mpsnr']['p50']:.1f} dB "
      f"(peripheral-only {s['peripheral_only_foveal_mpsnr']['p50']:.1f} dB); report -> {out_path}")

"""Command-line entry points: ``serve`` (TCP render/train server plus the
browser relay), ``bench`` (scripted loopback evaluation), ``trace``
(single-frame debug render)."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import protocol
from .camera import Camera
from .frameio import export_frame
from .pathtracer import RenderSettings, render, denoise
from .server import SessionConfig, SocketServer, run_benchmark_session, report_to_json
from .volume import EnvironmentMap, load_transfer_function, load_volume


def _load_scene(args):
    vol = load_volume(args.volume)
    tf = load_transfer_function(args.tf)
    env = EnvironmentMap.vertical_gradient((1.0, 1.0, 1.0), (0.35, 0.4, 0.5))
    return vol, tf, env


def _cmd_serve(args) -> int:
    vol, _tf, env = _load_scene(args)
    cfg = SessionConfig(preset=args.preset)
    server = SocketServer(vol, env, cfg, host=args.host, port=args.port)
    print(f"listening on {args.host}:{server.port} (preset {args.preset})")
    if args.http_port is not None:
        from .webrelay import WebRelay

        relay = WebRelay(server_host=args.host, server_port=server.port,
                         http_host=args.host, http_port=args.http_port, assets_dir=args.assets)
        relay.start()
        print(f"viewer assets + websocket relay on http://{args.host}:{relay.port}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _cmd_bench(args) -> int:
    vol, tf, env = _load_scene(args)
    with open(args.path, "r", encoding="utf-8") as fh:
        camera_path = json.load(fh)
    report = run_benchmark_session(vol, tf, camera_path, preset=args.preset, env=env)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))
    if report["frames"]:
        s = report["summary"]
        print(
            "foveal mpsnr p10/p50/p90: "
            f"{s['foveal_mpsnr']['p10']:.2f} / {s['foveal_mpsnr']['p50']:.2f} / {s['foveal_mpsnr']['p90']:.2f} dB"
        )
    else:
        print("empty camera path; wrote empty report")
    return 0


def _cmd_trace(args) -> int:
    vol, tf, env = _load_scene(args)
    pose = np.asarray(json.loads(args.pose), dtype=np.float64).reshape(4, 4)
    radius = 1.5 * vol.diagonal
    cam = Camera(
        pose=pose,
        fov_deg=args.fov,
        resolution=(args.res, args.res),
        near=max(radius * 1e-3, 1e-3),
        far=6.0 * radius,
    )
    frame = render(vol, tf, env, cam, RenderSettings(spp=args.spp, seed=args.seed))
    if not args.no_denoise:
        frame = denoise(frame)
    export_frame(frame, args.out, args.depth_out)
    print(f"wrote {args.out}" + (f" and {args.depth_out}" if args.depth_out else ""))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fovsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the render/train server")
    p.add_argument("--volume", required=True)
    p.add_argument("--tf", required=True)
    p.add_argument("--port", type=int, default=protocol.DEFAULT_PORT)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--preset", choices=("normal", "high"), default="normal")
    p.add_argument("--http-port", type=int, default=None, help="serve the web viewer + websocket relay")
    p.add_argument("--assets", default=None, help="directory with the built web viewer")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("bench", help="scripted loopback benchmark")
    p.add_argument("--volume", required=True)
    p.add_argument("--tf", required=True)
    p.add_argument("--path", required=True, help="camera path JSON (array of {pose, fov})")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("normal", "high"), default="normal")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("trace", help="single-frame debug render")
    p.add_argument("--volume", required=True)
    p.add_argument("--tf", required=True)
    p.add_argument("--pose", required=True, help="JSON array of 16 floats (world-from-camera, row-major)")
    p.add_argument("--fov", type=float, default=20.0)
    p.add_argument("--res", type=int, default=512)
    p.add_argument("--spp", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-out", default=None)
    p.add_argument("--no-denoise", action="store_true")
    p.set_defaults(fn=_cmd_trace)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

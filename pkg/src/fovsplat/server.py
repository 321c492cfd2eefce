"""Render/train server: answers pose requests through the path tracer, feeds
accepted views to the trainer via the novelty gate, pushes refined models,
and regenerates everything on settings changes.

``Session`` is the transport-free core (also driven directly by the
benchmark and the simulated-clock tests); ``SocketServer`` puts it behind
the TCP protocol, and ``run_benchmark_session`` scripts a full loopback run.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import protocol, training
from .camera import Camera, fibonacci_sphere_cameras
from .compositor import CompositeSettings, render_display_frame
from .metrics import compute_masked_metrics, foveal_crop, masked_psnr, masked_ssim, percentiles
from .pathtracer import (
    ColoredPoint,
    DenoiseSettings,
    FoveatedFrame,
    RenderSettings,
    denoise,
    generate_point_cloud,
    render,
)
from .rasterizer import rasterize
from .splats import SplatModel, apply_viewer_boost, compute_settings_hash, serialize
from .training import (
    TrainConfig,
    TrainView,
    ViewGate,
    initialize_model,
    refine_model,
    should_add_view,
    train_view_from_frame,
)
from .volume import EnvironmentMap, TransferFunction, Volume

PRESETS = {
    "normal": {"views": 12, "spp": 8},
    "high": {"views": 16, "spp": 16},
}


def apply_clip_planes(vol: Volume, planes: np.ndarray) -> Volume:
    """Zero density on the negative side of each plane (nx,ny,nz,offset in
    world space); materialized once per settings change."""
    planes = np.asarray(planes, dtype=np.float64).reshape(-1, 4)
    if len(planes) == 0:
        return vol
    nx, ny, nz = vol.dims
    xs = (np.arange(nx) + 0.5) * vol.spacing[0]
    ys = (np.arange(ny) + 0.5) * vol.spacing[1]
    zs = (np.arange(nz) + 0.5) * vol.spacing[2]
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([X, Y, Z, np.ones_like(X)], axis=-1) @ vol.world_transform.T
    data = vol.data.copy()
    for p in planes:
        signed = pts[..., :3] @ p[:3] + p[3]
        data[signed < 0] = 0.0
    return Volume(dims=vol.dims, spacing=vol.spacing, data=data, world_transform=vol.world_transform)


class ThreadWorker:
    """Single cancellable training job at a time."""

    def __init__(self):
        self._thread: Optional[threading.Thread] = None
        self._cancel = threading.Event()

    def submit(self, job: Callable[[threading.Event], None]) -> None:
        self.cancel_and_join()
        self._cancel = threading.Event()
        cancel = self._cancel
        self._thread = threading.Thread(target=job, args=(cancel,), daemon=True)
        self._thread.start()

    def cancel_and_join(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            self._cancel.set()
            self._thread.join()
        self._thread = None

    def is_busy(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)


class InlineWorker:
    """Deterministic worker for tests: jobs run when pump() is called."""

    def __init__(self):
        self._jobs: list[Callable[[threading.Event], None]] = []

    def submit(self, job) -> None:
        self._jobs.append(job)

    def cancel_and_join(self) -> None:
        self._jobs.clear()

    def is_busy(self) -> bool:
        return bool(self._jobs)

    def pump(self) -> None:
        while self._jobs:
            job = self._jobs.pop(0)
            job(threading.Event())

    def join(self, timeout=None) -> None:
        self.pump()


@dataclass
class SessionConfig:
    preset: str = "normal"
    view_resolution: tuple[int, int] = (128, 128)
    view_fov_deg: float = 30.0
    n_points: int = 20000
    point_samples: int = 64
    refine_trigger: int = 16
    init_iters: int = 700
    refine_iters: int = 2000
    target_gaussians: int = 10000
    seed: int = 0
    denoise: bool = True


@dataclass
class SessionState:
    settings_hash: Optional[int] = None
    model: Optional[SplatModel] = None
    train_status: str = "idle"  # idle | initializing | refining
    accepted_views: list[TrainView] = field(default_factory=list)
    frame_counter: int = 0
    new_views_since_refine: int = 0
    history: Optional[FoveatedFrame] = None


class Session:
    """One viewer session: current settings, model, accepted views, training.

    Pushes (model updates) go through ``on_push``; the request handlers
    return their direct responses. State is guarded by one lock; training
    runs on the injected worker and re-checks the settings epoch before
    publishing, so a settings change cancels it cleanly.
    """

    def __init__(
        self,
        volume: Volume,
        env: EnvironmentMap,
        config: SessionConfig | None = None,
        on_push: Optional[Callable[[protocol.Message], None]] = None,
        worker=None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.base_volume = volume
        self.env = env
        self.config = config or SessionConfig()
        self.on_push = on_push or (lambda msg: None)
        self.worker = worker if worker is not None else ThreadWorker()
        self.clock = clock
        self.lock = threading.RLock()
        self.state = SessionState()
        self.volume = volume
        self.tf: Optional[TransferFunction] = None
        self.spp = PRESETS[self.config.preset]["spp"]
        self.gate = ViewGate()

    # -- helpers -----------------------------------------------------------

    def _scene_extent(self) -> float:
        return 1.5 * self.volume.diagonal

    def _initial_cameras(self, count: int) -> list[Camera]:
        radius = 1.5 * self.volume.diagonal
        far = 4.0 * radius
        return fibonacci_sphere_cameras(
            self.volume.center_world,
            radius,
            count,
            fov_deg=self.config.view_fov_deg,
            resolution=self.config.view_resolution,
            near=max(radius * 1e-3, 1e-3),
            far=far,
        )

    def _frame_to_view(self, frame: FoveatedFrame, source: str) -> TrainView:
        return train_view_from_frame(frame, self.env, source)

    def _render(self, cam: Camera, spp: int, frame_id: int, with_history: bool) -> FoveatedFrame:
        settings = RenderSettings(spp=spp, seed=self.config.seed)
        t0 = self.clock()
        frame = render(self.volume, self.tf, self.env, cam, settings, frame_id=frame_id)
        if self.config.denoise:
            history = self.state.history if with_history else None
            frame = denoise(frame, history)
        frame.timestamp_ms = int(self.clock() * 1000)
        self._last_render_ms = (self.clock() - t0) * 1000.0
        return frame

    # -- handlers ----------------------------------------------------------

    def handle_settings_change(self, msg: protocol.RenderSettingsMessage) -> list[protocol.Message]:
        try:
            tf = TransferFunction.from_json(msg.tf_json)
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            return [protocol.ErrorMessage(protocol.ERR_SETTINGS, f"invalid transfer function: {exc}")]
        new_hash = compute_settings_hash(msg.tf_json, msg.clip_planes)
        with self.lock:
            if self.state.settings_hash == new_hash and self.state.model is not None:
                ack = protocol.SettingsAck(new_hash, 0)
                return [ack, protocol.SplatModelMessage(serialize(self.state.model))]
        self.worker.cancel_and_join()
        with self.lock:
            self.state = SessionState(settings_hash=new_hash, train_status="initializing")
            self.tf = tf
            self.volume = apply_clip_planes(self.base_volume, msg.clip_planes)
            if msg.spp:
                self.spp = msg.spp

        preset = PRESETS[self.config.preset]
        cams = self._initial_cameras(preset["views"])
        settings = RenderSettings(spp=preset["spp"], seed=self.config.seed)
        views = []
        for i, cam in enumerate(cams):
            frame = render(self.volume, self.tf, self.env, cam, settings, frame_id=i)
            if self.config.denoise:
                frame = denoise(frame)
            views.append(self._frame_to_view(frame, "initial"))
        points = generate_point_cloud(
            self.volume,
            self.tf,
            self.env,
            self.config.n_points,
            self.config.point_samples,
            seed=self.config.seed,
            settings=settings,
        )
        cfg = TrainConfig(
            total_iters=self.config.init_iters,
            simplify_at=min(95, max(self.config.init_iters // 7, 1)),
            target_gaussians=self.config.target_gaussians,
            seed=self.config.seed,
        )
        model = initialize_model(points, views, cfg, settings_hash=new_hash)
        with self.lock:
            self.state.model = model
            self.state.accepted_views = list(views)
            self.state.train_status = "idle"
            self.state.new_views_since_refine = 0
        self.on_push(protocol.SplatModelMessage(serialize(model)))
        return [protocol.SettingsAck(new_hash, 0)]

    def handle_pose_request(self, req: protocol.PoseRequest) -> list[protocol.Message]:
        with self.lock:
            if self.state.model is None or self.tf is None:
                return [protocol.ErrorMessage(protocol.ERR_STALE, "no active settings; send RENDER_SETTINGS first")]
            self.state.frame_counter += 1
        radius = 1.5 * self.volume.diagonal
        cam = Camera(
            pose=req.pose,
            fov_deg=req.fov_deg,
            resolution=req.resolution,
            near=max(radius * 1e-3, 1e-3),
            far=6.0 * radius,
        )
        spp = req.spp if req.spp else self.spp
        frame = self._render(cam, spp, req.frame_id, with_history=True)
        reply = protocol.frame_to_message(frame, render_ms=self._last_render_ms)

        with self.lock:
            self.state.history = frame
            existing = [v.camera for v in self.state.accepted_views]
            if should_add_view(self.gate, existing, cam, scene_extent=self._scene_extent()):
                self.state.accepted_views.append(self._frame_to_view(frame, "foveal"))
                self.state.new_views_since_refine += 1
            start_refine = (
                self.state.new_views_since_refine >= self.config.refine_trigger
                and self.state.train_status == "idle"
            )
            if start_refine:
                self.state.train_status = "refining"
                self.state.new_views_since_refine = 0
                epoch = self.state.settings_hash
                model = self.state.model
                views = list(self.state.accepted_views)
        if start_refine:
            self._submit_refinement(model, views, epoch)
        return [reply]

    def _submit_refinement(self, model: SplatModel, views: list[TrainView], epoch: int) -> None:
        iters = self.config.refine_iters
        cfg = TrainConfig(
            total_iters=iters,
            simplify_at=0,  # unused by refinement
            densify_from=min(500, iters // 4),
            densify_until=min(900, iters // 2),
            target_gaussians=self.config.target_gaussians,
            seed=self.config.seed + model.generation,
        )

        def job(cancel: threading.Event):
            try:
                refined = refine_model(
                    model, views, cfg, settings_hash=epoch, should_stop=cancel.is_set
                )
            except ValueError:
                refined = None
            with self.lock:
                stale = cancel.is_set() or self.state.settings_hash != epoch
                if not stale and refined is not None:
                    self.state.model = refined
                if self.state.train_status == "refining":
                    self.state.train_status = "idle"
            if not stale and refined is not None:
                self.on_push(protocol.SplatModelMessage(serialize(refined)))

        self.worker.submit(job)

    def handle_message(self, msg: protocol.Message) -> list[protocol.Message]:
        if isinstance(msg, protocol.RenderSettingsMessage):
            return self.handle_settings_change(msg)
        if isinstance(msg, protocol.PoseRequest):
            return self.handle_pose_request(msg)
        return [protocol.ErrorMessage(protocol.ERR_INTERNAL, f"unexpected {type(msg).__name__}")]


class SocketServer:
    """TCP front end: one session per connection, framed per the protocol."""

    def __init__(self, volume: Volume, env: EnvironmentMap, config: SessionConfig | None = None,
                 host: str = "127.0.0.1", port: int = protocol.DEFAULT_PORT):
        self.volume = volume
        self.env = env
        self.config = config or SessionConfig()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(4)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def serve_forever(self) -> None:
        self._accept_loop()

    def start(self) -> None:
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_client, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_client(self, sock: socket.socket) -> None:
        conn = protocol.Connection(sock)
        write_lock = threading.Lock()

        def push(msg):
            with write_lock:
                try:
                    conn.send(msg)
                except protocol.TransportError:
                    pass

        session = Session(self.volume, self.env, self.config, on_push=push)
        try:
            while not self._stop.is_set():
                try:
                    msg = conn.recv(timeout=0.5)
                except protocol.TransportError as exc:
                    if "timed out" in str(exc):
                        continue
                    break
                except protocol.ProtocolError:
                    push(protocol.ErrorMessage(protocol.ERR_INTERNAL, "protocol error"))
                    break
                for reply in session.handle_message(msg):
                    push(reply)
        finally:
            session.worker.cancel_and_join()
            conn.close()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=5.0)


def run_benchmark_session(
    volume: Volume,
    tf: TransferFunction,
    camera_path: list[dict],
    preset: str = "normal",
    env: EnvironmentMap | None = None,
    display_resolution: tuple[int, int] = (192, 192),
    display_fov_deg: float = 60.0,
    foveal_resolution: tuple[int, int] = (96, 96),
    foveal_fov_deg: float = 20.0,
    gt_spp: int = 48,
    session_config: SessionConfig | None = None,
) -> dict:
    """Scripted loopback run: per-pose hybrid composites scored against
    ground-truth path traces, with p10/p50/p90 summaries."""
    report = {"preset": preset, "lpips": "not computed", "frames": [], "summary": {}}
    if not camera_path:
        return report
    env = env or EnvironmentMap.uniform((1.0, 1.0, 1.0))
    cfg = session_config or SessionConfig(preset=preset)

    server = SocketServer(volume, env, cfg, port=0)
    server.start()
    models: list[SplatModel] = []
    try:
        conn = protocol.Connection.connect("127.0.0.1", server.port, timeout=600.0)

        def on_model(msg: protocol.SplatModelMessage):
            from .splats import deserialize

            models.append(deserialize(msg.blob))

        conn.send(protocol.RenderSettingsMessage(0, tf.to_json().encode(), np.zeros((0, 4)), 0))
        while True:
            msg = conn.recv(timeout=600.0)
            if isinstance(msg, protocol.SplatModelMessage):
                on_model(msg)
            elif isinstance(msg, protocol.SettingsAck):
                break
            elif isinstance(msg, protocol.ErrorMessage):
                raise protocol.RemoteError(msg.code, msg.message)
        if not models:
            raise RuntimeError("no initial model push received")

        rows = []
        for i, entry in enumerate(camera_path):
            pose = np.asarray(entry["pose"], dtype=np.float64).reshape(4, 4)
            fov = float(entry.get("fov", foveal_fov_deg))
            req = protocol.PoseRequest(
                frame_id=i + 1, pose=pose, fov_deg=fov, resolution=foveal_resolution, spp=0
            )
            reply = protocol.request_frame(conn, req, timeout=600.0, on_model=on_model)
            frame = protocol.message_to_frame(reply)

            radius = 1.5 * volume.diagonal
            display_cam = Camera(
                pose=pose,
                fov_deg=display_fov_deg,
                resolution=display_resolution,
                near=max(radius * 1e-3, 1e-3),
                far=6.0 * radius,
            )
            model = apply_viewer_boost(models[-1], 1.1, 1.1)
            settings = CompositeSettings()
            hybrid = render_display_frame(model, frame, display_cam, env, settings)

            gt = render(
                volume, tf, env, display_cam, RenderSettings(spp=gt_spp, seed=999), frame_id=10_000 + i
            )
            gt = denoise(gt)
            gt_rgba = np.concatenate(
                [gt.rgb_f, gt.alpha_f[:, :, None]], axis=2
            )
            from .compositor import render_peripheral

            periph = render_peripheral(model, display_cam, env)
            periph_rgba = np.concatenate([np.clip(periph.rgb, 0, 1), periph.alpha[:, :, None]], axis=2)

            center = (0.5, 0.5)
            row = {
                "frame_id": i + 1,
                "render_ms": float(reply.render_ms),
                "full": {
                    "mpsnr": masked_psnr(hybrid, gt_rgba),
                    "mssim": masked_ssim(hybrid, gt_rgba),
                },
                "foveal": {
                    "mpsnr": masked_psnr(
                        foveal_crop(hybrid, center, foveal_fov_deg, display_cam),
                        foveal_crop(gt_rgba, center, foveal_fov_deg, display_cam),
                    ),
                    "mssim": masked_ssim(
                        foveal_crop(hybrid, center, foveal_fov_deg, display_cam),
                        foveal_crop(gt_rgba, center, foveal_fov_deg, display_cam),
                    ),
                },
                "peripheral_only_foveal_mpsnr": masked_psnr(
                    foveal_crop(periph_rgba, center, foveal_fov_deg, display_cam),
                    foveal_crop(gt_rgba, center, foveal_fov_deg, display_cam),
                ),
            }
            rows.append(row)
        conn.close()
    finally:
        server.stop()

    report["frames"] = rows
    report["generations_received"] = [m.generation for m in models]

    def summarize(key_fn, name):
        vals = [key_fn(r) for r in rows]
        p10, p50, p90 = percentiles(vals, [10, 50, 90])
        report["summary"][name] = {"p10": p10, "p50": p50, "p90": p90}

    summarize(lambda r: r["full"]["mpsnr"], "full_mpsnr")
    summarize(lambda r: r["full"]["mssim"], "full_mssim")
    summarize(lambda r: r["foveal"]["mpsnr"], "foveal_mpsnr")
    summarize(lambda r: r["foveal"]["mssim"], "foveal_mssim")
    summarize(lambda r: r["render_ms"], "render_ms")
    summarize(lambda r: r["peripheral_only_foveal_mpsnr"], "peripheral_only_foveal_mpsnr")
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def report_from_json(text: str) -> dict:
    return json.loads(text)

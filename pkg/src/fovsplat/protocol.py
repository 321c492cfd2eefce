"""Length-prefixed binary protocol between viewer, tracer, and trainer.

Frame layout: payload length (u32, little-endian), message type (u8), then a
type-specific payload. Every multi-byte field is little-endian. The same
framing is carried verbatim over TCP and over the browser relay.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .camera import Camera
from .pathtracer import FoveatedFrame

DEFAULT_PORT = 7462
HEADER_SIZE = 5
MAX_PAYLOAD = 256 * 1024 * 1024

MSG_POSE_REQUEST = 1
MSG_FOVEATED_FRAME = 2
MSG_SPLAT_MODEL = 3
MSG_RENDER_SETTINGS = 4
MSG_SETTINGS_ACK = 5
MSG_ERROR = 255

ERR_SETTINGS = 1
ERR_STALE = 2
ERR_INTERNAL = 3


class ProtocolError(Exception):
    """Malformed or out-of-contract wire data."""


class TransportError(Exception):
    """Connection lost, closed mid-frame, or timed out."""


class RemoteError(Exception):
    """An ERROR message surfaced from the peer."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


@dataclass
class PoseRequest:
    frame_id: int
    pose: np.ndarray  # 4x4
    fov_deg: float
    resolution: tuple[int, int]
    spp: int
    foveation_center: tuple[float, float] = (0.5, 0.5)


@dataclass
class FrameMessage:
    frame_id: int
    pose: np.ndarray
    fov_deg: float
    resolution: tuple[int, int]
    rgba: np.ndarray  # (H, W, 4) uint8
    depth: np.ndarray  # (H, W) float32
    render_ms: float


@dataclass
class SplatModelMessage:
    blob: bytes  # FSPL payload (see splats module)


@dataclass
class RenderSettingsMessage:
    settings_hash: int
    tf_json: bytes
    clip_planes: np.ndarray  # (K, 4) float32
    spp: int


@dataclass
class SettingsAck:
    settings_hash: int
    initial_model_eta_ms: int


@dataclass
class ErrorMessage:
    code: int
    message: str


Message = Union[PoseRequest, FrameMessage, SplatModelMessage, RenderSettingsMessage, SettingsAck, ErrorMessage]


def _pack_pose(pose: np.ndarray) -> bytes:
    return np.asarray(pose, dtype="<f4").reshape(16).tobytes()


def _unpack_pose(buf: bytes, off: int) -> np.ndarray:
    return np.frombuffer(buf, dtype="<f4", count=16, offset=off).astype(np.float64).reshape(4, 4)


def encode(msg: Message) -> bytes:
    if isinstance(msg, PoseRequest):
        body = (
            struct.pack("<Q", msg.frame_id)
            + _pack_pose(msg.pose)
            + struct.pack(
                "<f2HH2f", msg.fov_deg, msg.resolution[0], msg.resolution[1], msg.spp, *msg.foveation_center
            )
        )
        mtype = MSG_POSE_REQUEST
    elif isinstance(msg, FrameMessage):
        w, h = msg.resolution
        rgba = np.ascontiguousarray(msg.rgba, dtype=np.uint8)
        depth = np.ascontiguousarray(msg.depth, dtype="<f4")
        if rgba.shape != (h, w, 4) or depth.shape != (h, w):
            raise ProtocolError("frame buffers do not match the declared resolution")
        body = (
            struct.pack("<Q", msg.frame_id)
            + _pack_pose(msg.pose)
            + struct.pack("<f2H", msg.fov_deg, w, h)
            + rgba.tobytes()
            + depth.tobytes()
            + struct.pack("<f", msg.render_ms)
        )
        mtype = MSG_FOVEATED_FRAME
    elif isinstance(msg, SplatModelMessage):
        body = msg.blob
        mtype = MSG_SPLAT_MODEL
    elif isinstance(msg, RenderSettingsMessage):
        planes = np.asarray(msg.clip_planes, dtype="<f4").reshape(-1, 4)
        if len(planes) > 255:
            raise ProtocolError("too many clip planes")
        body = (
            struct.pack("<Q", msg.settings_hash)
            + struct.pack("<I", len(msg.tf_json))
            + bytes(msg.tf_json)
            + struct.pack("<B", len(planes))
            + planes.tobytes()
            + struct.pack("<H", msg.spp)
        )
        mtype = MSG_RENDER_SETTINGS
    elif isinstance(msg, SettingsAck):
        body = struct.pack("<QI", msg.settings_hash, msg.initial_model_eta_ms)
        mtype = MSG_SETTINGS_ACK
    elif isinstance(msg, ErrorMessage):
        body = struct.pack("<H", msg.code) + msg.message.encode("utf-8")
        mtype = MSG_ERROR
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    if len(body) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(body)} bytes exceeds the 256 MB bound")
    return struct.pack("<IB", len(body), mtype) + body


def _decode_payload(mtype: int, body: bytes) -> Message:
    try:
        if mtype == MSG_POSE_REQUEST:
            frame_id = struct.unpack_from("<Q", body, 0)[0]
            pose = _unpack_pose(body, 8)
            fov, w, h, spp, fu, fv = struct.unpack_from("<f2HH2f", body, 72)
            return PoseRequest(frame_id, pose, fov, (w, h), spp, (fu, fv))
        if mtype == MSG_FOVEATED_FRAME:
            frame_id = struct.unpack_from("<Q", body, 0)[0]
            pose = _unpack_pose(body, 8)
            fov, w, h = struct.unpack_from("<f2H", body, 72)
            off = 80
            n = w * h
            if len(body) != off + n * 4 + n * 4 + 4:
                raise ProtocolError("frame payload size mismatch")
            rgba = np.frombuffer(body, dtype=np.uint8, count=n * 4, offset=off).reshape(h, w, 4)
            off += n * 4
            depth = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(h, w)
            off += n * 4
            (render_ms,) = struct.unpack_from("<f", body, off)
            return FrameMessage(frame_id, pose, fov, (w, h), rgba.copy(), depth.copy(), render_ms)
        if mtype == MSG_SPLAT_MODEL:
            return SplatModelMessage(blob=bytes(body))
        if mtype == MSG_RENDER_SETTINGS:
            settings_hash = struct.unpack_from("<Q", body, 0)[0]
            (tl,) = struct.unpack_from("<I", body, 8)
            tf_json = body[12 : 12 + tl]
            off = 12 + tl
            (k,) = struct.unpack_from("<B", body, off)
            off += 1
            planes = np.frombuffer(body, dtype="<f4", count=k * 4, offset=off).reshape(k, 4).copy()
            off += k * 16
            (spp,) = struct.unpack_from("<H", body, off)
            return RenderSettingsMessage(settings_hash, bytes(tf_json), planes, spp)
        if mtype == MSG_SETTINGS_ACK:
            settings_hash, eta = struct.unpack("<QI", body)
            return SettingsAck(settings_hash, eta)
        if mtype == MSG_ERROR:
            (code,) = struct.unpack_from("<H", body, 0)
            return ErrorMessage(code, body[2:].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed payload for type {mtype}: {exc}") from exc
    raise ProtocolError(f"unknown message type {mtype}")


def decode(buffer: bytes, offset: int = 0) -> Optional[tuple[Message, int]]:
    """Decode one message starting at ``offset``.

    Returns (message, new_offset), or None if more bytes are needed (not an
    error). Oversized lengths and unknown types raise ProtocolError.
    """
    if len(buffer) - offset < HEADER_SIZE:
        return None
    length, mtype = struct.unpack_from("<IB", buffer, offset)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {length} bytes exceeds the 256 MB bound")
    end = offset + HEADER_SIZE + length
    if len(buffer) < end:
        return None
    body = bytes(buffer[offset + HEADER_SIZE : end])
    return _decode_payload(mtype, body), end


def decode_all(buffer: bytes) -> list[Message]:
    out = []
    offset = 0
    while True:
        got = decode(buffer, offset)
        if got is None:
            if offset != len(buffer):
                raise ProtocolError("trailing partial frame")
            return out
        msg, offset = got
        out.append(msg)


def frame_to_message(frame: FoveatedFrame, render_ms: float = 0.0) -> FrameMessage:
    return FrameMessage(
        frame_id=frame.frame_id,
        pose=frame.camera.pose,
        fov_deg=frame.camera.fov_deg,
        resolution=frame.camera.resolution,
        rgba=frame.rgba,
        depth=frame.depth.astype(np.float32),
        render_ms=render_ms,
    )


def message_to_frame(msg: FrameMessage, near: float = 1e-3, far: float = 1e9) -> FoveatedFrame:
    """Rebuild a viewer-side frame; the albedo buffer is server-only and is
    left empty. Near/far only shape the projection matrix and do not affect
    depth-ray reconstruction."""
    cam = Camera(pose=msg.pose, fov_deg=msg.fov_deg, resolution=msg.resolution, near=near, far=far)
    w, h = msg.resolution
    return FoveatedFrame(
        frame_id=msg.frame_id,
        camera=cam,
        rgba=msg.rgba,
        depth=np.maximum(msg.depth.astype(np.float32), 0.0),
        albedo=np.zeros((h, w, 3), dtype=np.float32),
    )


class StreamDecoder:
    """Incremental framing: feed arbitrary byte chunks, pull whole messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        offset = 0
        while True:
            got = decode(bytes(self._buf), offset)
            if got is None:
                break
            msg, offset = got
            out.append(msg)
        if offset:
            del self._buf[:offset]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


class Connection:
    """Blocking message transport over a socket; one reader, one writer."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._decoder = StreamDecoder()
        self._queue: list[Message] = []

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "Connection":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"connect failed: {exc}") from exc
        sock.settimeout(timeout)
        return cls(sock)

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv(self, timeout: Optional[float] = None) -> Message:
        if self._queue:
            return self._queue.pop(0)
        if timeout is not None:
            self._sock.settimeout(timeout)
        while True:
            try:
                chunk = self._sock.recv(1 << 16)
            except socket.timeout as exc:
                raise TransportError("receive timed out") from exc
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            msgs = self._decoder.feed(chunk)
            if msgs:
                self._queue.extend(msgs[1:])
                return msgs[0]

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def request_frame(
    conn: Connection,
    req: PoseRequest,
    timeout: float = 30.0,
    on_model: Optional[Callable[[SplatModelMessage], None]] = None,
) -> FrameMessage:
    """Blocking request/response correlated by frame_id.

    Unsolicited SPLAT_MODEL pushes arriving in between are handed to
    ``on_model``; responses to superseded (older) frame_ids are dropped.
    """
    conn.send(req)
    while True:
        msg = conn.recv(timeout=timeout)
        if isinstance(msg, SplatModelMessage):
            if on_model is not None:
                on_model(msg)
            continue
        if isinstance(msg, ErrorMessage):
            raise RemoteError(msg.code, msg.message)
        if isinstance(msg, FrameMessage):
            if msg.frame_id < req.frame_id:
                continue  # stale response for a superseded request
            return msg
        raise ProtocolError(f"unexpected {type(msg).__name__} while waiting for a frame")

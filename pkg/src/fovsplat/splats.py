"""Gaussian-splat model and its quantized binary serialization (FSPL).

The model is struct-of-arrays for the optimizer and rasterizer; ``Gaussian``
is the per-primitive view used at the edges. Serialization keeps positions
at full f32 and quantizes scale/rotation/opacity/color to 8 bits, which is
what keeps peripheral models small enough to push mid-session.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

FSPL_MAGIC = b"FSPL"
FSPL_VERSION = 1
HEADER_FMT = "<4sIQQIff"
HEADER_SIZE = struct.calcsize(HEADER_FMT)
RECORD_SIZE = 12 + 3 + 4 + 1 + 3  # pos f32*3, scale u8*3, rot i8*4, opacity u8, rgb u8*3


class SplatFormatError(Exception):
    """Base class for FSPL decode failures."""


class BadMagicError(SplatFormatError):
    pass


class VersionMismatchError(SplatFormatError):
    pass


class TruncatedError(SplatFormatError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    rgb: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be unit length")
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class SplatModel:
    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions, w >= 0
    opacity_logits: np.ndarray  # (N,)
    rgbs: np.ndarray  # (N, 3) in [0, 1]
    generation: int = 0
    settings_hash: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.rgbs = np.asarray(self.rgbs, dtype=np.float64).reshape(n, 3)
        if n:
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("rotations must be unit quaternions")
            flip = self.rotations[:, 0] < 0
            self.rotations[flip] *= -1.0

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self.gaussian(i) for i in range(len(self))]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=float(self.opacity_logits[i]),
            rgb=self.rgbs[i],
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def from_gaussians(cls, gaussians, generation: int = 0, settings_hash: int = 0) -> "SplatModel":
        return cls(
            positions=np.array([g.position for g in gaussians]).reshape(-1, 3),
            log_scales=np.array([g.log_scale for g in gaussians]).reshape(-1, 3),
            rotations=np.array([g.rotation for g in gaussians]).reshape(-1, 4),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            rgbs=np.array([g.rgb for g in gaussians]).reshape(-1, 3),
            generation=generation,
            settings_hash=settings_hash,
        )


@dataclass
class RawSplats:
    """Unvalidated struct-of-arrays splat parameters.

    The optimizer works on this form (quaternions drift off unit length
    between steps; the rasterizer normalizes at use). ``to_model`` snapshots
    it into a validated SplatModel.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    rgbs: np.ndarray

    @classmethod
    def from_model(cls, model: SplatModel) -> "RawSplats":
        return cls(
            positions=model.positions.copy(),
            log_scales=model.log_scales.copy(),
            rotations=model.rotations.copy(),
            opacity_logits=model.opacity_logits.copy(),
            rgbs=model.rgbs.copy(),
        )

    def to_model(self, generation: int, settings_hash: int) -> SplatModel:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return SplatModel(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations / norms,
            opacity_logits=self.opacity_logits.copy(),
            rgbs=np.clip(self.rgbs, 0.0, 1.0),
            generation=generation,
            settings_hash=settings_hash,
        )


def compute_settings_hash(tf_json: str | bytes, clip_planes=None, extra: bytes = b"") -> int:
    """64-bit fingerprint of the render settings a splat model was built for."""
    h = hashlib.sha256()
    if isinstance(tf_json, str):
        tf_json = tf_json.encode("utf-8")
    h.update(tf_json)
    planes = np.asarray(clip_planes if clip_planes is not None else [], dtype="<f4").reshape(-1)
    h.update(planes.tobytes())
    h.update(extra)
    return int.from_bytes(h.digest()[:8], "little")


def serialize(model: SplatModel) -> bytes:
    """Encode to the FSPL layout; raises ValueError for an empty model."""
    n = len(model)
    if n == 0:
        raise ValueError("cannot serialize an empty splat model")
    smin = float(model.log_scales.min())
    smax = float(model.log_scales.max())
    smin32 = np.float32(smin)
    smax32 = np.float32(smax)
    header = struct.pack(
        HEADER_FMT,
        FSPL_MAGIC,
        FSPL_VERSION,
        model.settings_hash & 0xFFFFFFFFFFFFFFFF,
        model.generation & 0xFFFFFFFFFFFFFFFF,
        n,
        smin32,
        smax32,
    )
    rng = max(float(smax32) - float(smin32), 1e-12)
    q_scale = np.round((model.log_scales - float(smin32)) / rng * 255.0)
    q_scale = np.clip(q_scale, 0, 255).astype(np.uint8)

    # scale quaternions so the largest component hits 127 exactly; this makes
    # quantize(normalize(dequantize(q))) a fixed point
    q = model.rotations
    m = np.abs(q).max(axis=1, keepdims=True)
    q_rot = np.clip(np.round(q / m * 127.0), -127, 127).astype(np.int8)

    q_op = np.clip(np.floor(sigmoid(model.opacity_logits) * 256.0), 0, 255).astype(np.uint8)
    q_rgb = np.clip(np.round(model.rgbs * 255.0), 0, 255).astype(np.uint8)

    rec = np.zeros(n, dtype=[("pos", "<f4", 3), ("ls", "u1", 3), ("rot", "i1", 4), ("op", "u1"), ("rgb", "u1", 3)])
    rec["pos"] = model.positions.astype("<f4")
    rec["ls"] = q_scale
    rec["rot"] = q_rot
    rec["op"] = q_op
    rec["rgb"] = q_rgb
    return header + rec.tobytes()


def deserialize(blob: bytes) -> SplatModel:
    if len(blob) < HEADER_SIZE:
        raise TruncatedError("blob shorter than FSPL header")
    magic, version, settings_hash, generation, count, smin, smax = struct.unpack_from(HEADER_FMT, blob, 0)
    if magic != FSPL_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FSPL_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    expected = HEADER_SIZE + count * RECORD_SIZE
    if len(blob) != expected:
        raise TruncatedError(f"expected {expected} bytes for {count} gaussians, got {len(blob)}")
    rec = np.frombuffer(
        blob,
        dtype=[("pos", "<f4", 3), ("ls", "u1", 3), ("rot", "i1", 4), ("op", "u1"), ("rgb", "u1", 3)],
        count=count,
        offset=HEADER_SIZE,
    )
    rng = max(float(smax) - float(smin), 1e-12)
    log_scales = float(smin) + rec["ls"].astype(np.float64) / 255.0 * rng
    rot = rec["rot"].astype(np.float64)
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    rotations = rot / norms
    opacities = (rec["op"].astype(np.float64) + 0.5) / 256.0
    return SplatModel(
        positions=rec["pos"].astype(np.float64),
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=logit(opacities),
        rgbs=rec["rgb"].astype(np.float64) / 255.0,
        generation=int(generation),
        settings_hash=int(settings_hash),
    )


def save_model(model: SplatModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> SplatModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def apply_viewer_boost(model: SplatModel, scale_factor: float = 1.1, opacity_factor: float = 1.1) -> SplatModel:
    """Viewer-side correction for undersized/undersaturated reconstructions:
    scales splat extents and opacities (opacity in linear space, clamped)."""
    if scale_factor <= 0 or opacity_factor <= 0:
        raise ValueError("boost factors must be positive")
    log_scales = model.log_scales if scale_factor == 1.0 else model.log_scales + np.log(scale_factor)
    if opacity_factor == 1.0:
        logits = model.opacity_logits
    else:
        op = np.clip(sigmoid(model.opacity_logits) * opacity_factor, 1e-6, 1.0 - 1e-6)
        logits = logit(op)
    return SplatModel(
        positions=model.positions.copy(),
        log_scales=np.array(log_scales, dtype=np.float64),
        rotations=model.rotations.copy(),
        opacity_logits=np.array(logits, dtype=np.float64),
        rgbs=model.rgbs.copy(),
        generation=model.generation,
        settings_hash=model.settings_hash,
    )

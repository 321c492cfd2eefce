"""Volume data model: density grid, transfer function, and environment lighting.

Shared by the path tracer (sampling, extinction), the point-cloud seeder, and
the render server (settings hashing, .vvol I/O).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1


class VolumeFormatError(Exception):
    """Base class for .vvol load failures."""


class MalformedHeaderError(VolumeFormatError):
    """Magic, version, or dims field is invalid."""


class SizeMismatchError(VolumeFormatError):
    """File payload does not match the voxel count declared in the header."""


class NonFiniteDataError(VolumeFormatError):
    """Density payload contains NaN or infinity."""


def _identity4() -> np.ndarray:
    return np.eye(4, dtype=np.float64)


@dataclass
class Volume:
    """Dense scalar density grid in [0,1], placed in world space.

    ``data`` is indexed ``[z, y, x]`` (C-contiguous, so the flat layout is
    x-fastest). ``spacing`` is mm per voxel; local coordinates put voxel
    ``(ix,iy,iz)``'s center at ``((ix+0.5)*sx, (iy+0.5)*sy, (iz+0.5)*sz)``,
    and ``world_transform`` maps those local mm coordinates into world space.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    world_transform: np.ndarray = field(default_factory=_identity4)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        expected = (self.dims[2], self.dims[1], self.dims[0])
        if self.data.shape != expected:
            if self.data.size == np.prod(expected):
                self.data = self.data.reshape(expected)
            else:
                raise ValueError(
                    f"data size {self.data.size} != dims product {np.prod(expected)}"
                )
        if not np.isfinite(self.data).all():
            raise ValueError("density data contains non-finite values")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("density values must lie in [0,1]")
        self.world_transform = np.asarray(self.world_transform, dtype=np.float64).reshape(4, 4)
        self._world_to_local = np.linalg.inv(self.world_transform)

    @property
    def size_mm(self) -> np.ndarray:
        """Local-space edge lengths of the volume box (mm)."""
        return np.array(self.dims, dtype=np.float64) * np.array(self.spacing)

    @property
    def extent(self) -> float:
        """Smallest world-space edge of the volume box."""
        return float(self.size_mm.min())

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size_mm))

    @property
    def center_world(self) -> np.ndarray:
        c = np.append(self.size_mm * 0.5, 1.0)
        return (self.world_transform @ c)[:3]

    @property
    def world_to_local(self) -> np.ndarray:
        return self._world_to_local

    def voxel_center_world(self, ix: int, iy: int, iz: int) -> np.ndarray:
        local = np.array(
            [(ix + 0.5) * self.spacing[0], (iy + 0.5) * self.spacing[1], (iz + 0.5) * self.spacing[2], 1.0]
        )
        return (self.world_transform @ local)[:3]


def centered_transform(dims: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """World transform that puts the volume box's center at the world origin."""
    t = np.eye(4)
    t[:3, 3] = -0.5 * np.asarray(dims, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    return t


def sample_density(vol: Volume, p_world: np.ndarray) -> np.ndarray | float:
    """Trilinear density lookup at world position(s); 0 outside the volume box.

    Accepts a single 3-vector or an (N,3) array.
    """
    p = np.asarray(p_world, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    ph = np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)
    local = (vol.world_to_local @ ph.T).T[:, :3]
    # continuous voxel coordinate: voxel centers sit at integer coordinates
    g = local / np.asarray(vol.spacing) - 0.5
    nx, ny, nz = vol.dims
    size = vol.size_mm
    inside = np.all((local >= 0.0) & (local <= size), axis=1)

    g = np.clip(g, 0.0, [nx - 1, ny - 1, nz - 1])
    i0 = np.floor(g).astype(np.int64)
    i0 = np.minimum(i0, [nx - 2 if nx > 1 else 0, ny - 2 if ny > 1 else 0, nz - 2 if nz > 1 else 0])
    f = g - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    d = vol.data
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = d[z0, y0, x0] * (1 - fx) + d[z0, y0, x1] * fx
    c10 = d[z0, y1, x0] * (1 - fx) + d[z0, y1, x1] * fx
    c01 = d[z1, y0, x0] * (1 - fx) + d[z1, y0, x1] * fx
    c11 = d[z1, y1, x0] * (1 - fx) + d[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = (c0 * (1 - fz) + c1 * fz) * inside
    return float(out[0]) if single else out


@dataclass
class TransferFunction:
    """Piecewise-linear map from density in [0,1] to RGBA in [0,1].

    Control points must be strictly increasing in density, with the first at
    0 and the last at 1.
    """

    densities: np.ndarray
    rgba: np.ndarray

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=np.float64).ravel()
        self.rgba = np.asarray(self.rgba, dtype=np.float64).reshape(-1, 4)
        if self.densities.shape[0] != self.rgba.shape[0]:
            raise ValueError("control point count mismatch")
        if self.densities.shape[0] < 2:
            raise ValueError("need at least two control points")
        if not np.all(np.diff(self.densities) > 0):
            raise ValueError("control point densities must be strictly increasing")
        if self.densities[0] != 0.0 or self.densities[-1] != 1.0:
            raise ValueError("control points must span [0,1] exactly")
        if self.rgba.min() < 0.0 or self.rgba.max() > 1.0:
            raise ValueError("rgba control values must lie in [0,1]")

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, Sequence[float]]]) -> "TransferFunction":
        ds = [p[0] for p in points]
        cs = [p[1] for p in points]
        return cls(np.array(ds), np.array(cs))

    def eval(self, density) -> np.ndarray:
        """RGBA at the given density value(s); density is clamped to [0,1]."""
        d = np.clip(np.asarray(density, dtype=np.float64), 0.0, 1.0)
        out = np.empty(d.shape + (4,), dtype=np.float64)
        for c in range(4):
            out[..., c] = np.interp(d, self.densities, self.rgba[:, c])
        return out

    @property
    def max_alpha(self) -> float:
        # piecewise-linear interpolation never exceeds its control values
        return float(self.rgba[:, 3].max())

    def bake_lut(self, size: int = 1024) -> np.ndarray:
        """Dense (size,4) float32 table sampled at ``i/(size-1)``."""
        grid = np.linspace(0.0, 1.0, size)
        return self.eval(grid).astype(np.float32)

    def to_json(self) -> str:
        return json.dumps(
            [{"d": float(d), "rgba": [float(v) for v in c]} for d, c in zip(self.densities, self.rgba)]
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "TransferFunction":
        raw = json.loads(text)
        if not isinstance(raw, list):
            raise ValueError("transfer function JSON must be an array")
        return cls.from_points([(e["d"], e["rgba"]) for e in raw])


def load_transfer_function(path) -> TransferFunction:
    with open(path, "r", encoding="utf-8") as fh:
        return TransferFunction.from_json(fh.read())


def save_transfer_function(tf: TransferFunction, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(tf.to_json())


@dataclass
class EnvironmentMap:
    """Equirectangular RGB radiance map used for illumination at ray escape."""

    radiance: np.ndarray  # (H, W, 3) float32

    def __post_init__(self):
        self.radiance = np.ascontiguousarray(self.radiance, dtype=np.float32)
        if self.radiance.ndim != 3 or self.radiance.shape[2] != 3:
            raise ValueError("radiance must have shape (H, W, 3)")
        if not np.isfinite(self.radiance).all() or self.radiance.min() < 0.0:
            raise ValueError("radiance must be finite and non-negative")

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.radiance.shape[1], self.radiance.shape[0])

    @classmethod
    def uniform(cls, color, resolution: tuple[int, int] = (8, 4)) -> "EnvironmentMap":
        w, h = resolution
        img = np.broadcast_to(np.asarray(color, dtype=np.float32), (h, w, 3)).copy()
        return cls(img)

    @classmethod
    def vertical_gradient(cls, top, bottom, resolution: tuple[int, int] = (16, 32)) -> "EnvironmentMap":
        w, h = resolution
        t = np.linspace(0.0, 1.0, h)[:, None, None]
        img = (1 - t) * np.asarray(top, dtype=np.float32) + t * np.asarray(bottom, dtype=np.float32)
        return cls(np.broadcast_to(img, (h, w, 3)).copy())

    def sample(self, directions: np.ndarray) -> np.ndarray:
        """Bilinear lookup for unit direction(s); wraps in azimuth."""
        d = np.asarray(directions, dtype=np.float64)
        single = d.ndim == 1
        d = np.atleast_2d(d)
        h, w = self.radiance.shape[:2]
        theta = np.arccos(np.clip(d[:, 1], -1.0, 1.0))  # 0 at +Y
        phi = np.arctan2(d[:, 0], -d[:, 2])
        u = phi / (2 * np.pi) + 0.5
        v = theta / np.pi
        x = u * w - 0.5
        y = np.clip(v * h - 0.5, 0.0, h - 1)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        x0m = np.mod(x0, w)
        x1m = np.mod(x0 + 1, w)
        y1 = np.minimum(y0 + 1, h - 1)
        r = self.radiance.astype(np.float64)
        out = (
            r[y0, x0m] * ((1 - fx) * (1 - fy))[:, None]
            + r[y0, x1m] * (fx * (1 - fy))[:, None]
            + r[y1, x0m] * ((1 - fx) * fy)[:, None]
            + r[y1, x1m] * (fx * fy)[:, None]
        )
        return out[0] if single else out


def save_volume(vol: Volume, path) -> None:
    """Write the little-endian .vvol format (see README for the layout)."""
    with open(path, "wb") as fh:
        fh.write(VVOL_MAGIC)
        fh.write(struct.pack("<I", VVOL_VERSION))
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<3f", *vol.spacing))
        fh.write(np.asarray(vol.world_transform, dtype="<f4").tobytes())
        fh.write(vol.data.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    """Read a .vvol file; raises a distinct VolumeFormatError per failure mode."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = 4 + 4 + 12 + 12 + 64
    if len(blob) < header_size:
        raise MalformedHeaderError("file shorter than .vvol header")
    if blob[:4] != VVOL_MAGIC:
        raise MalformedHeaderError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VVOL_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    dims = struct.unpack_from("<3I", blob, 8)
    if any(d == 0 for d in dims):
        raise MalformedHeaderError(f"zero dimension in header: {dims}")
    spacing = struct.unpack_from("<3f", blob, 20)
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise MalformedHeaderError(f"invalid spacing {spacing}")
    transform = np.frombuffer(blob, dtype="<f4", count=16, offset=32).reshape(4, 4).astype(np.float64)
    voxels = int(dims[0]) * int(dims[1]) * int(dims[2])
    payload = blob[header_size:]
    if len(payload) != voxels * 4:
        raise SizeMismatchError(f"expected {voxels * 4} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims[2], dims[1], dims[0])
    if not np.isfinite(data).all():
        raise NonFiniteDataError("density payload contains non-finite values")
    return Volume(dims=dims, spacing=spacing, data=data.copy(), world_transform=transform)


def make_procedural_volume(
    kind: str,
    dims: tuple[int, int, int] = (64, 64, 64),
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    sigma: float = 0.5,
) -> Volume:
    """Deterministic test volumes standing in for CT data.

    Kinds: ``sphere`` (solid ball, radius 0.4x smallest extent), ``shell``
    (thin spherical shell), ``tubes`` (three thin axis-aligned cylinders),
    ``homogeneous`` (constant density ``sigma``), ``wall`` (thin opaque slab
    spanning x/y, used by the reprojection fixtures).
    """
    dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    size = np.array(dims, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    ext = size.min()
    # voxel-center coordinates relative to the box center, in mm
    xs = (np.arange(nx) + 0.5) * spacing[0] - size[0] / 2
    ys = (np.arange(ny) + 0.5) * spacing[1] - size[1] / 2
    zs = (np.arange(nz) + 0.5) * spacing[2] - size[2] / 2
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")

    if kind == "homogeneous":
        if not 0.0 <= sigma <= 1.0:
            raise ValueError("homogeneous density must lie in [0,1]")
        data = np.full((nz, ny, nx), sigma, dtype=np.float32)
    elif kind == "sphere":
        r = np.sqrt(X * X + Y * Y + Z * Z)
        data = (r <= 0.4 * ext).astype(np.float32)
    elif kind == "shell":
        r = np.sqrt(X * X + Y * Y + Z * Z)
        r_out = 0.4 * ext
        r_in = 0.33 * ext
        data = ((r <= r_out) & (r >= r_in)).astype(np.float32)
    elif kind == "tubes":
        rad = 0.06 * ext
        t1 = np.sqrt(Y * Y + Z * Z) <= rad  # along x
        t2 = np.sqrt(X * X + Z * Z) <= rad  # along y
        t3 = np.sqrt((X - 0.15 * ext) ** 2 + (Y + 0.15 * ext) ** 2) <= rad  # along z, offset
        data = (t1 | t2 | t3).astype(np.float32)
    elif kind == "wall":
        half = 0.05 * ext
        data = (np.abs(Z) <= half).astype(np.float32)
    else:
        raise ValueError(f"unknown procedural volume kind {kind!r}")

    return Volume(dims=dims, spacing=spacing, data=data, world_transform=centered_transform(dims, spacing))


def shell_chord_length(vol_extent: float) -> float:
    """Analytic in-shell path length of a ray through the shell fixture's center."""
    r_out = 0.4 * vol_extent
    r_in = 0.33 * vol_extent
    return 2.0 * (r_out - r_in)

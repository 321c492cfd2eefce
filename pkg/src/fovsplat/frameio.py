"""Fixture export formats shared by the tracer and the harness: RGBA PNG and
raw little-endian f32 depth with an 8-byte (width, height) header."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .pathtracer import FoveatedFrame


def save_png(rgba: np.ndarray, path) -> None:
    arr = np.asarray(rgba)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 3:
        Image.fromarray(arr, "RGB").save(path)
    else:
        Image.fromarray(arr, "RGBA").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGBA"))


def save_depth_raw(depth: np.ndarray, path) -> None:
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(d.tobytes())


def load_depth_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError("depth file shorter than its header")
    w, h = struct.unpack_from("<II", blob, 0)
    if len(blob) != 8 + w * h * 4:
        raise ValueError("depth payload does not match header dimensions")
    return np.frombuffer(blob, dtype="<f4", count=w * h, offset=8).reshape(h, w).copy()


def export_frame(frame: FoveatedFrame, png_path, depth_path=None) -> None:
    save_png(frame.rgba, png_path)
    if depth_path is not None:
        save_depth_raw(frame.depth, depth_path)

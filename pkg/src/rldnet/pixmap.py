"""Binary portable pixmap I/O (P5 greyscale, P6 RGB, 8-bit)."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError(f"pixmap data must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        h, w = arr.shape
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        h, w = arr.shape[:2]
        magic = b"P6"
    else:
        raise ValueError(f"pixmap must be (H, W) or (H, W, 3), got {arr.shape}")
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def decode_pnm(payload: bytes) -> np.ndarray:
    m = _HEADER.match(payload)
    if not m:
        raise ValueError("not a binary P5/P6 pixmap")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"only 8-bit pixmaps are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    body = payload[m.end():]
    need = w * h * channels
    if len(body) < need:
        raise ValueError(f"pixmap truncated: need {need} bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8, count=need)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_pgm(path, arr: np.ndarray) -> None:
    if np.asarray(arr).ndim != 2:
        raise ValueError("P5 expects a 2-D array")
    atomic_write_bytes(path, encode_pnm(arr))


def write_ppm(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(arr))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def to_uint8(image_chw: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` float image in [0, 1] -> ``(H, W, 3)`` uint8."""
    return np.rint(np.clip(image_chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float32 in [0, 1]."""
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()

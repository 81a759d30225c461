"""Color transfer and image files.

Renders are linear radiance; comparisons and 8-bit output happen in sRGB.
The transfer is extended linearly above 1 so overbright pixels keep a
nonzero derivative during optimization; PNG output clips as usual.
"""
from __future__ import annotations

import json

import numpy as np
from PIL import Image

__all__ = [
    "linear_to_srgb",
    "srgb_to_linear",
    "dsrgb_dlinear",
    "write_png",
    "read_png",
    "write_pfm",
    "read_pfm",
    "write_sidecar",
]

_THRESH = 0.0031308
_STHRESH = 0.04045
# tangent extension above 1: s(x) = 1 + s'(1) (x - 1)
_SLOPE_AT_ONE = 1.055 / 2.4


def linear_to_srgb(x):
    x = np.asarray(x, dtype=np.float64)
    lo = 12.92 * x
    mid = 1.055 * np.power(np.clip(x, _THRESH, 1.0), 1.0 / 2.4) - 0.055
    hi = 1.0 + _SLOPE_AT_ONE * (x - 1.0)
    return np.where(x <= _THRESH, lo, np.where(x <= 1.0, mid, hi))


def srgb_to_linear(s):
    s = np.asarray(s, dtype=np.float64)
    lo = s / 12.92
    mid = np.power((np.clip(s, _STHRESH, 1.0) + 0.055) / 1.055, 2.4)
    hi = 1.0 + (s - 1.0) / _SLOPE_AT_ONE
    return np.where(s <= _STHRESH, lo, np.where(s <= 1.0, mid, hi))


def dsrgb_dlinear(x):
    x = np.asarray(x, dtype=np.float64)
    mid = (1.055 / 2.4) * np.power(np.clip(x, _THRESH, 1.0), 1.0 / 2.4 - 1.0)
    return np.where(x <= _THRESH, 12.92, np.where(x <= 1.0, mid, _SLOPE_AT_ONE))


def write_png(path, linear: np.ndarray) -> None:
    """8-bit sRGB PNG from linear data; (H, W) gray or (H, W, 3) color."""
    srgb = np.clip(linear_to_srgb(np.clip(linear, 0.0, None)), 0.0, 1.0)
    data = np.round(srgb * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def read_png(path) -> np.ndarray:
    """Linear image from an 8-bit sRGB PNG."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(img)


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM, rows stored bottom to top per the format."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM wants (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1]).astype(np.float64)


def write_sidecar(path, config: dict) -> None:
    """Deterministic JSON sidecar describing how an image was produced."""
    with open(path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")

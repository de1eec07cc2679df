"""PFM and 8-bit PNG readers/writers."""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """A file on disk does not match its expected format."""


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows stored bottom-to-top."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"write_pfm expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


_PFM_HEADER = re.compile(rb"\A(P[fF])\n(\d+) (\d+)\n(-?\d+(?:\.\d*)?)\n")


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = _PFM_HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: malformed PFM header")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 1 if kind == b"Pf" else 3
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end() :]
    expected = w * h * channels * 4
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(body)} (truncated or padded)")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w, channels) if channels == 3 else np.frombuffer(body, dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(arr[::-1]).astype(np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    """[0,1] float image -> uint8 via round(clip(x, 0, 1) * 255)."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Write a float [0,1] or uint8 image; HxW is grayscale, HxWx3 is RGB."""
    arr = image if image.dtype == np.uint8 else quantize(image)
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ValueError("RGB images must have 3 channels")
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path, format="PNG", optimize=False)


def read_png(path, as_float: bool = True) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: no such file")
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            arr = np.array(im)
    except OSError as e:
        raise FormatError(f"{path}: unreadable PNG ({e})") from e
    return arr.astype(np.float32) / 255.0 if as_float else arr

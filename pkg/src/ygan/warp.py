"""Rectified trinocular geometry and the depth-induced horizontal warp.

Cameras sit at x = -baseline (left), 0 (center) and +baseline (right) with
identical orientation. A point seen at center column u with disparity d
appears at column u + d in the left view and u - d in the right view, so
the left view is reconstructed by sampling the center image at u - d and the
right view at u + d.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .diffcore import Tensor, clamp, div, record

DISP_EPS = 1e-6


@dataclass(frozen=True)
class CameraRig:
    focal_px: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if self.width % 16 or self.height % 16 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive multiples of 16, got {self.width}x{self.height}")

    @classmethod
    def centered(cls, width: int = 96, height: int = 64, focal_px: float = 100.0, baseline: float = 0.5) -> "CameraRig":
        """Rig with the principal point at the image center."""
        return cls(float(focal_px), (width - 1) / 2.0, (height - 1) / 2.0, float(baseline), int(width), int(height))

    @property
    def fb(self) -> float:
        return self.focal_px * self.baseline

    def camera_x(self, view: str) -> float:
        return {"left": -self.baseline, "center": 0.0, "right": self.baseline}[view]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(float(d["focal_px"]), float(d["cx"]), float(d["cy"]), float(d["baseline"]), int(d["width"]), int(d["height"]))


def depth_to_disparity(depth: Tensor, rig: CameraRig) -> Tensor:
    """d = focal * baseline / Z, elementwise."""
    if np.any(depth.data <= 0):
        raise ValueError("depth must be positive everywhere")
    fb = Tensor(np.full(depth.shape, rig.fb, dtype=depth.dtype))
    return div(fb, depth)


def disparity_to_depth(disp: Tensor, rig: CameraRig, eps: float = DISP_EPS) -> Tensor:
    """Z = focal * baseline / max(d, eps)."""
    d = clamp(disp, eps, np.inf)
    fb = Tensor(np.full(disp.shape, rig.fb, dtype=disp.dtype))
    return div(fb, d)


def _check_direction(direction: str) -> float:
    if direction == "left":
        return -1.0
    if direction == "right":
        return 1.0
    raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")


def make_shift_grid(disp: Tensor, direction: str) -> Tensor:
    """Source x coordinate for each target pixel: u - d (left) or u + d (right)."""
    sign = _check_direction(direction)
    w = disp.shape[-1]
    u = np.broadcast_to(np.arange(w, dtype=disp.dtype), disp.shape)
    out = u + disp.dtype.type(sign) * disp.data
    return record("shift_grid", out, (disp,), lambda g: (g * g.dtype.type(sign),))


def bilinear_sample(image: Tensor, x_coords: Tensor) -> tuple[Tensor, Tensor]:
    """Sample ``image`` along rows at fractional columns ``x_coords``.

    Linear interpolation between the floor and ceil columns; rows are
    unchanged. Coordinates outside [0, W-1] give 0 and a 0 in the mask.
    Returns (sampled image, valid mask).
    """
    b, c, h, w = image.shape
    if x_coords.shape != (b, 1, h, w):
        raise ValueError(f"x_coords shape {x_coords.shape} must be {(b, 1, h, w)}")
    x = x_coords.data
    dt = image.dtype
    valid = (x >= 0) & (x <= w - 1)
    x0 = np.floor(x)
    alpha = np.where(valid, x - x0, 0).astype(dt)
    i0 = np.clip(x0, 0, w - 1).astype(np.intp)
    i1 = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    vmask = valid.astype(dt)
    i0c = np.broadcast_to(i0, image.shape)
    i1c = np.broadcast_to(i1, image.shape)
    v0 = np.take_along_axis(image.data, i0c, axis=3)
    v1 = np.take_along_axis(image.data, i1c, axis=3)
    out = ((1 - alpha) * v0 + alpha * v1) * vmask

    def _bw(g):
        gi = gx = None
        gv = g * vmask
        if image.requires_grad:
            # flat scatter-add keeps accumulation order fixed
            base = (np.arange(b * c * h) * w).reshape(b, c, h, 1)
            gi = np.bincount((base + i0c).ravel(), weights=(gv * (1 - alpha)).ravel(), minlength=b * c * h * w)
            gi += np.bincount((base + i1c).ravel(), weights=(gv * alpha).ravel(), minlength=b * c * h * w)
            gi = gi.reshape(image.shape).astype(dt)
        if x_coords.requires_grad:
            gx = (gv * (v1 - v0)).sum(axis=1, keepdims=True).astype(dt)
        return gi, gx

    sampled = record("bilinear_sample", out, (image, x_coords), _bw)
    return sampled, Tensor(vmask)


def synthesize_view(center: Tensor, disp: Tensor, direction: str) -> tuple[Tensor, Tensor]:
    """Reconstruct the left or right view from the center image and its disparity."""
    return bilinear_sample(center, make_shift_grid(disp, direction))


def side_consistency_mask(
    center_depth: np.ndarray, side_depth: np.ndarray, rig: CameraRig, direction: str, rel_tol: float = 0.01
) -> np.ndarray:
    """Target-grid pixels where the center-aligned warp is geometrically exact.

    A side-view pixel u qualifies when the surface it sees lies at the depth
    the warp assumes there (center depth at u) and both center columns the
    sampler reads around u -/+ d see that same depth. Arrays are [..., H, W].
    """
    sign = _check_direction(direction)
    cd = np.asarray(center_depth, dtype=np.float64)
    sd = np.asarray(side_depth, dtype=np.float64)
    w = cd.shape[-1]
    u = np.arange(w, dtype=np.float64)
    x = u + sign * rig.fb / cd
    inside = (x >= 0) & (x <= w - 1)
    i0 = np.clip(np.floor(x), 0, w - 1).astype(np.intp)
    i1 = np.clip(i0 + 1, 0, w - 1)
    z0 = np.take_along_axis(cd, i0, axis=-1)
    z1 = np.take_along_axis(cd, i1, axis=-1)
    same = lambda a, b: np.abs(a - b) <= rel_tol * b
    return (inside & same(sd, cd) & same(z0, cd) & same(z1, cd)).astype(np.float32)


def as_image_tensor(arr: np.ndarray, dtype=np.float32) -> Tensor:
    """HxWx3 (or BxHxWx3) array to a [B,3,H,W] tensor."""
    a = np.asarray(arr, dtype=dtype)
    if a.ndim == 3:
        a = a[None]
    return Tensor(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def as_map_tensor(arr: np.ndarray, dtype=np.float32) -> Tensor:
    """HxW (or BxHxW) array to a [B,1,H,W] tensor."""
    a = np.asarray(arr, dtype=dtype)
    if a.ndim == 2:
        a = a[None]
    return Tensor(np.ascontiguousarray(a[:, None]))


def warp_image(center_hwc: np.ndarray, depth_hw: np.ndarray, rig: CameraRig, direction: str) -> tuple[np.ndarray, np.ndarray]:
    """Numpy convenience wrapper: HxWx3 image + HxW depth -> (HxWx3 warped, HxW mask)."""
    disp = depth_to_disparity(as_map_tensor(depth_hw, np.float64), rig)
    out, mask = synthesize_view(as_image_tensor(center_hwc, np.float64), disp, direction)
    return out.data[0].transpose(1, 2, 0), mask.data[0, 0]

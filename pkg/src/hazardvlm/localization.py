"""Attention-map to hazard-coordinate conversion.

Inference uses the hard argmax of the map; training uses a differentiable
soft-argmax (re-sharpened by a temperature, then the expectation of the
grid coordinates). Grid cells map to pixels by the patch-center
convention: pixel = g * p + p/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import Tensor

LOG_EPS = 1e-8
DEFAULT_TAU = 0.5


@dataclass
class AttentionMap:
    """Non-negative spatial weight grid summing to 1 (within 1e-6)."""

    grid: Tensor

    def __post_init__(self):
        if self.grid.data.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got shape {self.grid.shape}")

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    def validate(self) -> None:
        data = self.grid.data
        if (data < 0).any():
            raise ValueError("attention map has negative entries")
        if abs(float(data.sum()) - 1.0) > 1e-6:
            raise ValueError(f"attention map mass {float(data.sum())} != 1")


@dataclass(frozen=True)
class PixelPoint:
    """Image coordinates: x horizontal (column), y vertical (row)."""

    x: float
    y: float


def aggregate_heads(per_head: Tensor, query_mode: str = "mean", grid_shape: tuple[int, int] | None = None) -> AttentionMap:
    """Reduce h x n x n per-head attention to one mass per key position.

    Mean over heads, then over query positions, renormalized and reshaped
    to the (square by default) patch grid. Stays on the tape, so training
    gradients flow back into the attention weights.
    """
    if query_mode != "mean":
        raise ValueError(f"unsupported query_mode {query_mode!r}")
    if per_head.data.ndim != 3 or per_head.shape[1] != per_head.shape[2]:
        raise ValueError(f"expected h x n x n attention, got {per_head.shape}")
    n = per_head.shape[1]
    if grid_shape is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"{n} key positions do not form a square grid")
        grid_shape = (side, side)
    if grid_shape[0] * grid_shape[1] != n:
        raise ValueError(f"grid {grid_shape} incompatible with {n} positions")
    mass = tz.mean(tz.mean(per_head, axis=0), axis=0)
    normalized = tz.div(mass, tz.tsum(mass))
    return AttentionMap(tz.reshape(normalized, grid_shape))


def hard_argmax(a: AttentionMap) -> tuple[int, int]:
    """Grid cell (gx, gy) of the maximum entry; ties take the first
    row-major occurrence."""
    flat = int(np.argmax(a.grid.data))
    gy, gx = divmod(flat, a.width)
    return gx, gy


def soft_argmax(a: AttentionMap, tau: float = DEFAULT_TAU) -> tuple[Tensor, Tensor]:
    """Differentiable surrogate: sharpened-map expectation of grid coords.

    The map is re-sharpened via softmax(log(A + eps)/tau); as tau -> 0 the
    result approaches hard_argmax on unique-max maps. Returns scalar
    tensors (gx, gy) carrying gradients.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    h, w = a.height, a.width
    logits = tz.scale(tz.log(tz.shift(a.grid, LOG_EPS)), 1.0 / tau)
    p = tz.softmax(tz.reshape(logits, (1, h * w)), axis=1)
    grid_x = np.tile(np.arange(w, dtype=np.float32), h).reshape(1, h * w)
    grid_y = np.repeat(np.arange(h, dtype=np.float32), w).reshape(1, h * w)
    gx = tz.tsum(tz.mul(p, Tensor(grid_x)))
    gy = tz.tsum(tz.mul(p, Tensor(grid_y)))
    return gx, gy


def grid_to_pixel(g: tuple[float, float], patch_size: int, image_size: int) -> PixelPoint:
    """Patch-center convention, clamped into the image."""
    gx, gy = g
    px = min(max(gx * patch_size + patch_size / 2.0, 0.0), image_size - 1.0)
    py = min(max(gy * patch_size + patch_size / 2.0, 0.0), image_size - 1.0)
    return PixelPoint(px, py)


def grid_to_pixel_tensor(gx: Tensor, gy: Tensor, patch_size: int) -> tuple[Tensor, Tensor]:
    """Tape-connected pixel mapping for the training path.

    No clamp: a soft-argmax output lies inside the grid's convex hull, so
    the mapped point is already within [p/2, S - p/2].
    """
    half = patch_size / 2.0
    return tz.shift(tz.scale(gx, patch_size), half), tz.shift(tz.scale(gy, patch_size), half)


def pixel_to_grid(point: PixelPoint, patch_size: int) -> tuple[float, float]:
    """Inverse of the patch-center mapping (continuous, unclamped)."""
    half = patch_size / 2.0
    return (point.x - half) / patch_size, (point.y - half) / patch_size


def predict_hazard(model, image, mode: str = "infer", tau: float = DEFAULT_TAU):
    """Hazard location from a model's attention map.

    infer mode: PixelPoint via hard argmax (deterministic).
    train mode: (x, y) scalar tensors via soft-argmax, gradients attached.
    """
    _, amap = model.encode_image(image)
    p = model.config.patch_size
    if mode == "infer":
        return grid_to_pixel(hard_argmax(amap), p, model.config.image_size)
    if mode == "train":
        gx, gy = soft_argmax(amap, tau)
        return grid_to_pixel_tensor(gx, gy, p)
    raise ValueError(f"unknown mode {mode!r}")

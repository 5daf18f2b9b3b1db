"""Attention maps over a patch grid and the attention-supervision loss.

The supervision target puts uniform mass on every patch whose center falls
inside the ground-truth box; the loss is KL(target || predicted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import PatchGrid, PixelBox, PixelPoint, patch_center, point_in_box

DEFAULT_EPS = 1e-8


class AttentionError(ValueError):
    pass


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class AttentionMap:
    grid: PatchGrid
    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.shape != self.grid.shape:
            raise AttentionError(f"weights shape {w.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(w)):
            raise AttentionError("attention weights must be finite")
        if np.any(w < 0):
            raise AttentionError("attention weights must be non-negative")
        if not np.any(w > 0):
            raise AttentionError("attention map is all zeros")
        object.__setattr__(self, "weights", w)

    def __eq__(self, other):
        if not isinstance(other, AttentionMap):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TargetDistribution:
    grid: PatchGrid
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.shape != self.grid.shape:
            raise AttentionError(f"probs shape {p.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise AttentionError("probabilities must be finite and non-negative")
        if math.fsum(p.ravel()) > 1 + 1e-9:
            raise AttentionError("probabilities sum to more than 1")
        object.__setattr__(self, "probs", p)

    def __eq__(self, other):
        if not isinstance(other, TargetDistribution):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.probs, other.probs)

    __hash__ = None


def normalize(a: AttentionMap) -> TargetDistribution:
    total = math.fsum(a.weights.ravel())
    return TargetDistribution(a.grid, a.weights / total)


def argmax_index(a: AttentionMap) -> tuple[int, int]:
    # np.argmax returns the first maximum in C (row-major) order.
    flat = int(np.argmax(a.weights))
    return divmod(flat, a.grid.cols)


def argmax_point(a: AttentionMap) -> PixelPoint:
    """Center of the highest-attention patch; ties go to the first in row-major order."""
    i, j = argmax_index(a)
    return patch_center(a.grid, i, j)


def build_target(gt: PixelBox, grid: PatchGrid, eps: float = DEFAULT_EPS) -> TargetDistribution:
    """Ground-truth attention target for a box.

    Patches whose (clamped) center lies in ``gt`` get y=1. When the box is too
    small to contain any center, the patch whose center is nearest the box
    center gets y=1 instead. Returns ``y / (sum(y) + eps)``.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if gt.x2 < 0 or gt.y2 < 0 or gt.x1 > grid.image_w or gt.y1 > grid.image_h:
        raise AttentionError(f"box {gt.as_list()} lies outside the {grid.image_w}x{grid.image_h} image")

    y = np.zeros(grid.shape)
    centers = [[patch_center(grid, i, j) for j in range(grid.cols)] for i in range(grid.rows)]
    for i in range(grid.rows):
        for j in range(grid.cols):
            if point_in_box(centers[i][j], gt):
                y[i, j] = 1.0

    if not y.any():
        c = gt.center
        best, best_d = (0, 0), math.inf
        for i in range(grid.rows):
            for j in range(grid.cols):
                d = (centers[i][j].x - c.x) ** 2 + (centers[i][j].y - c.y) ** 2
                if d < best_d:
                    best, best_d = (i, j), d
        y[best] = 1.0

    return TargetDistribution(grid, y / (y.sum() + eps))


def attention_kl(p: TargetDistribution, a: TargetDistribution) -> float:
    """KL(p || a) in nats, summed over patches with p_i > 0."""
    if p.grid != a.grid:
        raise AttentionError("distributions are over different grids")
    mask = p.probs > 0
    if np.any(a.probs[mask] == 0):
        raise AttentionError("predicted attention is zero where the target has mass")
    pi = p.probs[mask]
    return math.fsum(pi * np.log(pi / a.probs[mask]))

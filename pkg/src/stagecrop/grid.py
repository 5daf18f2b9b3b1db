"""Pixel/patch geometry shared by the rest of the package.

Coordinates are floats everywhere. Rounding only happens where a value leaves
the process (CLI output, image cropping).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_list(self) -> list[float]:
        return [self.x, self.y]


@dataclass(frozen=True)
class PixelBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"invalid box {vals}: need x1 <= x2 and y1 <= y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> PixelPoint:
        return PixelPoint((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def translate(self, dx: float, dy: float) -> "PixelBox":
        return PixelBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def contains_box(self, other: "PixelBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_seq(cls, seq) -> "PixelBox":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))


@dataclass(frozen=True)
class PatchGrid:
    """A rows x cols tiling of an image_w x image_h image by square patches.

    The grid must cover the image with at most one partial row/column of
    overhang, which is what a padded ViT patchifier produces.
    """

    rows: int
    cols: int
    patch_px: int
    image_w: float
    image_h: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.patch_px < 1:
            raise ValueError(f"degenerate grid {self}")
        if not (self.rows * self.patch_px >= self.image_h > (self.rows - 1) * self.patch_px):
            raise ValueError(
                f"{self.rows} rows of {self.patch_px}px do not tile image height {self.image_h}")
        if not (self.cols * self.patch_px >= self.image_w > (self.cols - 1) * self.patch_px):
            raise ValueError(
                f"{self.cols} cols of {self.patch_px}px do not tile image width {self.image_w}")

    @classmethod
    def covering(cls, image_w: float, image_h: float, patch_px: int) -> "PatchGrid":
        """Smallest grid of ``patch_px`` patches that covers the image."""
        if image_w <= 0 or image_h <= 0:
            raise ValueError(f"image must have positive size, got {image_w}x{image_h}")
        return cls(
            rows=math.ceil(image_h / patch_px),
            cols=math.ceil(image_w / patch_px),
            patch_px=patch_px,
            image_w=image_w,
            image_h=image_h,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols


def patch_center(grid: PatchGrid, i: int, j: int) -> PixelPoint:
    """Pixel center of patch (i, j); row i maps to y, column j to x.

    Centers of overhanging edge patches are clamped to the last pixel
    (``image_w - 1`` / ``image_h - 1``).
    """
    if not (0 <= i < grid.rows and 0 <= j < grid.cols):
        raise IndexError(f"patch ({i}, {j}) outside {grid.rows}x{grid.cols} grid")
    x = (j + 0.5) * grid.patch_px
    y = (i + 0.5) * grid.patch_px
    x = min(max(x, 0.0), max(grid.image_w - 1, 0.0))
    y = min(max(y, 0.0), max(grid.image_h - 1, 0.0))
    return PixelPoint(x, y)


class CropMismatchError(ValueError):
    """A local point does not fit inside the crop it supposedly came from."""


def local_to_global(crop: PixelBox, local: PixelPoint) -> PixelPoint:
    if not (0 <= local.x <= crop.width and 0 <= local.y <= crop.height):
        raise CropMismatchError(
            f"local point ({local.x}, {local.y}) outside crop extent "
            f"{crop.width}x{crop.height}")
    return PixelPoint(crop.x1 + local.x, crop.y1 + local.y)


def global_to_local(crop: PixelBox, point: PixelPoint) -> PixelPoint:
    if not point_in_box(point, crop):
        raise CropMismatchError(f"point ({point.x}, {point.y}) outside crop {crop.as_list()}")
    return PixelPoint(point.x - crop.x1, point.y - crop.y1)


def point_in_box(p: PixelPoint, b: PixelBox) -> bool:
    """Boundary-inclusive containment test."""
    return b.x1 <= p.x <= b.x2 and b.y1 <= p.y <= b.y2


def clamp_box(b: PixelBox, image_w: float, image_h: float) -> PixelBox:
    def clamp(v, hi):
        return min(max(v, 0.0), hi)

    return PixelBox(clamp(b.x1, image_w), clamp(b.y1, image_h),
                    clamp(b.x2, image_w), clamp(b.y2, image_h))


def boxes_intersect(a: PixelBox, b: PixelBox) -> bool:
    return a.x1 <= b.x2 and b.x1 <= a.x2 and a.y1 <= b.y2 and b.y1 <= a.y2


def snap_outward(b: PixelBox) -> PixelBox:
    """Expand a box to integer pixel coordinates."""
    return PixelBox(math.floor(b.x1), math.floor(b.y1), math.ceil(b.x2), math.ceil(b.y2))

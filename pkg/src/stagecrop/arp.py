"""Attention-driven crop proposal.

Pipeline: keep patches with weight >= tau * max, split them into connected
components, keep the ``k`` components with the largest attention mass, and
box their attention-weighted centers. The box is then padded, grown to a
minimum edge length and clamped to the image.

All sums go through ``math.fsum`` so results do not depend on summation
order; two correct implementations agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionMap
from .grid import PixelBox, PixelPoint, clamp_box, patch_center

Patch = tuple[int, int]

_NEIGHBOR_OFFSETS = {
    4: ((0, 1), (1, 0)),
    8: ((0, 1), (1, 0), (1, 1), (1, -1)),
}


@dataclass(frozen=True)
class ArpConfig:
    tau: float = 0.3
    k: int = 20
    connectivity: int = 8
    min_crop_px: float = 448
    pad_px: float = 28

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.connectivity not in _NEIGHBOR_OFFSETS:
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_crop_px < 1:
            raise ValueError(f"min_crop_px must be >= 1, got {self.min_crop_px}")
        if self.pad_px < 0:
            raise ValueError(f"pad_px must be >= 0, got {self.pad_px}")


@dataclass(frozen=True)
class Component:
    patches: tuple[Patch, ...]  # row-major sorted
    score: float
    center: PixelPoint


def threshold_set(a: AttentionMap, tau: float) -> set[Patch]:
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    cutoff = tau * float(a.weights.max())
    rows, cols = np.nonzero(a.weights >= cutoff)
    return set(zip(rows.tolist(), cols.tolist()))


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def connected_components(s: set[Patch], connectivity: int = 8) -> list[tuple[Patch, ...]]:
    """Partition ``s`` into maximal connected groups.

    Groups come back with members in row-major order, and the groups
    themselves are ordered by their first (smallest) member.
    """
    if connectivity not in _NEIGHBOR_OFFSETS:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    if not s:
        return []

    members = sorted(s)
    index = {p: n for n, p in enumerate(members)}
    parent = list(range(len(members)))

    for n, (i, j) in enumerate(members):
        for di, dj in _NEIGHBOR_OFFSETS[connectivity]:
            m = index.get((i + di, j + dj))
            if m is None:
                continue
            ra, rb = _find(parent, n), _find(parent, m)
            if ra != rb:
                # smaller index wins so each root is its group's first member
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb

    groups: dict[int, list[Patch]] = {}
    for n, p in enumerate(members):
        groups.setdefault(_find(parent, n), []).append(p)
    return [tuple(groups[root]) for root in sorted(groups)]


def weighted_center(a: AttentionMap, patches) -> PixelPoint:
    ws, xs, ys = [], [], []
    for i, j in patches:
        w = float(a.weights[i, j])
        c = patch_center(a.grid, i, j)
        ws.append(w)
        xs.append(w * c.x)
        ys.append(w * c.y)
    total = math.fsum(ws)
    if not total > 0:
        raise ValueError("component has zero total attention")
    return PixelPoint(math.fsum(xs) / total, math.fsum(ys) / total)


def component_score(a: AttentionMap, patches) -> float:
    return math.fsum(float(a.weights[i, j]) for i, j in patches)


def find_components(a: AttentionMap, cfg: ArpConfig) -> list[Component]:
    """All thresholded components, in deterministic (smallest-member) order."""
    groups = connected_components(threshold_set(a, cfg.tau), cfg.connectivity)
    return [Component(g, component_score(a, g), weighted_center(a, g)) for g in groups]


def select_top_k(components: list[Component], k: int) -> list[Component]:
    # stable sort: equal scores keep component order
    return sorted(components, key=lambda c: -c.score)[:k]


def centers_bbox(points) -> PixelBox:
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    return PixelBox(min(xs), min(ys), max(xs), max(ys))


def finalize_box(box: PixelBox, cfg: ArpConfig, image_w: float, image_h: float) -> PixelBox:
    """Pad, grow each edge to ``min_crop_px`` about the center, then clamp."""
    x1, y1 = box.x1 - cfg.pad_px, box.y1 - cfg.pad_px
    x2, y2 = box.x2 + cfg.pad_px, box.y2 + cfg.pad_px
    if x2 - x1 < cfg.min_crop_px:
        cx = (x1 + x2) / 2
        x1, x2 = cx - cfg.min_crop_px / 2, cx + cfg.min_crop_px / 2
    if y2 - y1 < cfg.min_crop_px:
        cy = (y1 + y2) / 2
        y1, y2 = cy - cfg.min_crop_px / 2, cy + cfg.min_crop_px / 2
    return clamp_box(PixelBox(x1, y1, x2, y2), image_w, image_h)


def arp_regions(a: AttentionMap, cfg: ArpConfig) -> list[Component]:
    """The top-k components that drive the crop, highest score first."""
    return select_top_k(find_components(a, cfg), cfg.k)


def arp_crop(a: AttentionMap, cfg: ArpConfig = ArpConfig()) -> PixelBox:
    """Crop region (in the map's own pixel frame) proposed by the attention map."""
    kept = arp_regions(a, cfg)
    raw = centers_bbox([c.center for c in kept])
    return finalize_box(raw, cfg, a.grid.image_w, a.grid.image_h)

"""Multi-stage grounding controller.

Each stage queries the backend on a region of the screenshot. The predicted
point is the argmax patch of the returned attention. If the response asks for
another look (``<tool_call>yes</tool_call>``) and the stage budget allows it,
the attention map is turned into a crop and the backend is queried again on
that crop.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .arp import ArpConfig, arp_crop
from .attention import AttentionError, AttentionMap, argmax_point
from .errors import BackendError, GridMismatch, GroundingError
from .grid import (
    PatchGrid,
    PixelBox,
    PixelPoint,
    local_to_global,
    snap_outward,
)


class ToolCall(str, enum.Enum):
    YES = "yes"
    NO = "no"
    ABSENT = "absent"


_TOOL_CALL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)


def parse_tool_call(raw_text: Optional[str]) -> ToolCall:
    """Decision carried by the first ``<tool_call>...</tool_call>`` span."""
    if not raw_text:
        return ToolCall.ABSENT
    m = _TOOL_CALL_RE.search(raw_text)
    if m is None:
        return ToolCall.ABSENT
    body = m.group(1).strip().lower()
    if body == "yes":
        return ToolCall.YES
    if body == "no":
        return ToolCall.NO
    return ToolCall.ABSENT


@dataclass(frozen=True)
class ImageRef:
    width: float
    height: float
    path: Optional[str] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image must have positive size, got {self.width}x{self.height}")

    @property
    def full_box(self) -> PixelBox:
        return PixelBox(0, 0, self.width, self.height)


@dataclass(frozen=True)
class ModelResponse:
    attention: AttentionMap
    tool_call: ToolCall
    raw_text: str = ""


@dataclass(frozen=True)
class AscConfig:
    max_stages: int = 2
    arp: ArpConfig = field(default_factory=ArpConfig)
    force_final_on_budget: bool = True

    def __post_init__(self):
        if self.max_stages < 1:
            raise ValueError(f"max_stages must be >= 1, got {self.max_stages}")


@dataclass(frozen=True)
class StageRecord:
    stage: int
    query_region: PixelBox
    response: ModelResponse
    point_local: PixelPoint
    point_global: PixelPoint
    next_region: Optional[PixelBox] = None

    @property
    def tool_call(self) -> ToolCall:
        return self.response.tool_call


@dataclass(frozen=True)
class StageTrace:
    image: ImageRef
    instruction: str
    stages: tuple[StageRecord, ...]
    final_point: Optional[PixelPoint]

    @property
    def stages_used(self) -> int:
        return len(self.stages)

    def to_dict(self, include_attention: bool = True) -> dict:
        stages = []
        for s in self.stages:
            grid = s.response.attention.grid
            entry = {
                "stage": s.stage,
                "query_region": s.query_region.as_list(),
                "grid": {"rows": grid.rows, "cols": grid.cols, "patch_px": grid.patch_px},
                "tool_call": s.tool_call.value,
                "raw_text": s.response.raw_text,
                "point_local": s.point_local.as_list(),
                "point_global": s.point_global.as_list(),
                "next_region": s.next_region.as_list() if s.next_region else None,
            }
            if include_attention:
                entry["attention"] = s.response.attention.weights.tolist()
            stages.append(entry)
        return {
            "image": {"path": self.image.path, "width": self.image.width,
                      "height": self.image.height},
            "instruction": self.instruction,
            "stages": stages,
            "stages_used": self.stages_used,
            "final_point": self.final_point.as_list() if self.final_point else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageTrace":
        img = d["image"]
        image = ImageRef(img["width"], img["height"], img.get("path"))
        stages = []
        for s in d["stages"]:
            if "attention" not in s:
                raise ValueError("trace was written without attention weights")
            region = PixelBox.from_seq(s["query_region"])
            grid = PatchGrid.covering(region.width, region.height, s["grid"]["patch_px"])
            resp = ModelResponse(
                AttentionMap(grid, np.asarray(s["attention"], dtype=np.float64)),
                ToolCall(s["tool_call"]),
                s.get("raw_text", ""),
            )
            stages.append(StageRecord(
                stage=s["stage"],
                query_region=region,
                response=resp,
                point_local=PixelPoint(*s["point_local"]),
                point_global=PixelPoint(*s["point_global"]),
                next_region=PixelBox.from_seq(s["next_region"]) if s.get("next_region") else None,
            ))
        fp = d.get("final_point")
        return cls(image, d["instruction"], tuple(stages), PixelPoint(*fp) if fp else None)


def _check_grid(resp: ModelResponse, region: PixelBox):
    grid = resp.attention.grid
    if grid.image_w != region.width or grid.image_h != region.height:
        raise GridMismatch(
            f"attention grid is for a {grid.image_w}x{grid.image_h} image, "
            f"but the queried region is {region.width}x{region.height}")


def next_region(resp: ModelResponse, region: PixelBox, arp_cfg: ArpConfig) -> PixelBox:
    """Crop for the next stage, in full-image coordinates.

    The crop is computed in the region's local frame, translated, snapped
    outward to whole pixels (so it can be cut from the actual image) and kept
    inside the current region.
    """
    local = arp_crop(resp.attention, arp_cfg)
    snapped = snap_outward(local.translate(region.x1, region.y1))
    crop = PixelBox(
        max(snapped.x1, region.x1), max(snapped.y1, region.y1),
        min(snapped.x2, region.x2), min(snapped.y2, region.y2),
    )
    if crop.width <= 0 or crop.height <= 0:
        raise AttentionError(f"degenerate crop {crop.as_list()}")
    return crop


def ground(image: ImageRef, instruction: str, backend, cfg: AscConfig = AscConfig(),
           force_refine: bool = False) -> StageTrace:
    """Run one grounding episode.

    ``force_refine`` crops after every stage regardless of the tool-call
    decision, up to ``cfg.max_stages``. Used for difficulty labeling, where
    the second stage is always attempted.
    """
    region = image.full_box
    stages: list[StageRecord] = []

    def partial():
        return StageTrace(image, instruction, tuple(stages),
                          stages[-1].point_global if stages else None)

    for stage in range(1, cfg.max_stages + 1):
        try:
            resp = backend.respond(image, region, instruction, stage)
            _check_grid(resp, region)
        except BackendError as e:
            raise GroundingError(f"stage {stage}: {e}", partial(), kind=e.kind) from e

        point_local = argmax_point(resp.attention)
        point_global = local_to_global(region, point_local)
        wants_more = force_refine or resp.tool_call is ToolCall.YES

        if wants_more and stage < cfg.max_stages:
            nxt = next_region(resp, region, cfg.arp)
            stages.append(StageRecord(stage, region, resp, point_local, point_global, nxt))
            region = nxt
            continue

        stages.append(StageRecord(stage, region, resp, point_local, point_global))
        if wants_more and not cfg.force_final_on_budget:
            raise GroundingError(
                f"stage budget of {cfg.max_stages} exhausted with a pending tool call",
                partial(), kind="budget")
        break

    return partial()

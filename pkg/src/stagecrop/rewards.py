"""Rule-based rollout rewards and group-relative advantages.

total = format + tool + point, where

* format is 1 when the text carries exactly one well-formed tool-call span,
* tool is 1 when the tool-call decision agrees with whether the predicted
  point already hits the target (no + hit, or yes + miss),
* point is a Gaussian of the offset from the box center, with per-axis
  sigma = alpha * box extent (floored at ``sigma_floor_px``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from .asc import ToolCall, parse_tool_call
from .grid import PixelBox, PixelPoint, point_in_box

FORMAT_PROFILES = ("single_span", "single_span_strict")

_OPEN = "<tool_call>"
_CLOSE = "</tool_call>"
_SPAN_RE = re.compile(r"<tool_call>\s*(?i:yes|no)\s*</tool_call>")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    sigma_floor_px: float = 1.0
    # KL penalty of the policy objective; kept for provenance, not used here
    beta_kl: float = 0.04
    format_profile: str = "single_span"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.sigma_floor_px > 0:
            raise ValueError("sigma_floor_px must be > 0")
        if self.format_profile not in FORMAT_PROFILES:
            raise ValueError(f"format_profile must be one of {FORMAT_PROFILES}")


@dataclass(frozen=True)
class Rollout:
    raw_text: str
    point: PixelPoint
    gt_bbox: PixelBox
    tool_call: ToolCall = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tool_call", parse_tool_call(self.raw_text))

    @property
    def format_ok(self) -> bool:
        return format_reward(self) == 1


def point_reward(r: Rollout, cfg: RewardConfig = RewardConfig()) -> float:
    b = r.gt_bbox
    sx = max(cfg.alpha * (b.x2 - b.x1), cfg.sigma_floor_px)
    sy = max(cfg.alpha * (b.y2 - b.y1), cfg.sigma_floor_px)
    c = b.center
    return math.exp(-0.5 * ((r.point.x - c.x) ** 2 / sx ** 2 + (r.point.y - c.y) ** 2 / sy ** 2))


def tool_reward(r: Rollout) -> int:
    if r.tool_call is ToolCall.ABSENT:
        return 0
    inside = point_in_box(r.point, r.gt_bbox)
    if r.tool_call is ToolCall.NO:
        return int(inside)
    return int(not inside)


def format_reward(r: Rollout, profile: str = "single_span") -> int:
    """1 iff the text holds exactly one ``<tool_call>yes|no</tool_call>`` span.

    Stray or unbalanced tags fail. ``single_span_strict`` additionally
    requires the span to be the last thing in the text.
    """
    text = r.raw_text or ""
    if text.count(_OPEN) != 1 or text.count(_CLOSE) != 1:
        return 0
    m = _SPAN_RE.search(text)
    if m is None:
        return 0
    if profile == "single_span_strict" and text[m.end():].strip():
        return 0
    return 1


def total_reward(r: Rollout, cfg: RewardConfig = RewardConfig()) -> float:
    return format_reward(r, cfg.format_profile) + tool_reward(r) + point_reward(r, cfg)


def reward_components(r: Rollout, cfg: RewardConfig = RewardConfig()) -> dict:
    fmt = format_reward(r, cfg.format_profile)
    tool = tool_reward(r)
    pt = point_reward(r, cfg)
    return {"format_reward": fmt, "tool_reward": tool, "point_reward": pt,
            "total_reward": fmt + tool + pt}


def group_advantages(rewards: Sequence[float], eps: float = 1e-6) -> list[float]:
    """(r - mean) / (population std + eps) within one group of rollouts."""
    n = len(rewards)
    if n < 2:
        raise ValueError(f"need at least 2 rewards per group, got {n}")
    mean = math.fsum(rewards) / n
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / n)
    return [(r - mean) / (std + eps) for r in rewards]

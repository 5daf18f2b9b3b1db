"""Adaptive multi-stage GUI grounding driven by attention maps."""

from .arp import ArpConfig, Component, arp_crop, connected_components, threshold_set, weighted_center
from .asc import AscConfig, ImageRef, ModelResponse, StageTrace, ToolCall, ground, parse_tool_call
from .attention import AttentionMap, TargetDistribution, argmax_point, attention_kl, build_target, normalize
from .backends import HttpBackend, RecordedBackend, SyntheticBackend, SyntheticModelSpec, http_respond, synthetic_respond
from .eval import EvalReport, GroundingSample, emit_report, evaluate, label_difficulty, load_dataset
from .grid import PatchGrid, PixelBox, PixelPoint, clamp_box, local_to_global, patch_center, point_in_box
from .rewards import RewardConfig, Rollout, format_reward, group_advantages, point_reward, tool_reward, total_reward

__version__ = "0.1.0"

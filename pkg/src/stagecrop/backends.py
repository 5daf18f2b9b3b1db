"""Model backends.

A backend answers ``respond(image, region, instruction, stage)`` with a
:class:`ModelResponse` whose attention grid tiles ``region`` (in the region's
own pixel frame).

``SyntheticBackend`` is an offline stand-in for a VLM with an attention
head. Its one load-bearing assumption: localization error is proportional to
the diagonal of the queried region, so a tighter crop gives a finer
prediction. That is a modeling choice for simulation, not a measured fact.
"""

from __future__ import annotations

import base64
import hashlib
import io
import math
import threading
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Union

import httpx
import numpy as np

from .asc import ImageRef, ModelResponse, StageTrace, ToolCall
from .attention import AttentionError, AttentionMap, argmax_point
from .errors import (
    BackendError,
    BackendStatusError,
    BackendTimeout,
    BackendUnavailable,
    GridMismatch,
    SchemaViolation,
)
from .grid import PatchGrid, PixelBox, PixelPoint, local_to_global, point_in_box

TOOL_POLICIES = ("oracle", "always_yes", "always_no", "bernoulli")


class Backend(Protocol):
    def respond(self, image: ImageRef, region: PixelBox, instruction: str,
                stage: int) -> ModelResponse: ...


# --------------------------------------------------------------------------
# synthetic
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticModelSpec:
    """Parameters of the simulated model for one ground-truth target.

    ``noise_frac`` is the std of the blob-center displacement as a fraction of
    the queried region's diagonal. A tuple gives one value per stage; the
    last entry repeats for later stages.
    """

    gt_bbox: Optional[PixelBox] = None
    noise_frac: Union[float, tuple[float, ...]] = 0.0
    blob_sigma_px: float = 28.0
    tool_policy: str = "oracle"
    bernoulli_p: float = 0.5
    seed: int = 0
    patch_px: int = 28

    def __post_init__(self):
        noise = self.noise_frac
        if isinstance(noise, (list, tuple)):
            noise = tuple(float(v) for v in noise)
            if not noise:
                raise ValueError("noise_frac tuple must not be empty")
        else:
            noise = float(noise)
        object.__setattr__(self, "noise_frac", noise)
        if any(v < 0 for v in self._noise_seq()):
            raise ValueError("noise_frac must be >= 0")
        if not self.blob_sigma_px > 0:
            raise ValueError("blob_sigma_px must be > 0")
        if self.tool_policy not in TOOL_POLICIES:
            raise ValueError(f"tool_policy must be one of {TOOL_POLICIES}, got {self.tool_policy!r}")
        if not 0 <= self.bernoulli_p <= 1:
            raise ValueError("bernoulli_p must be in [0, 1]")
        if self.patch_px < 1:
            raise ValueError("patch_px must be >= 1")

    def _noise_seq(self) -> tuple[float, ...]:
        return self.noise_frac if isinstance(self.noise_frac, tuple) else (self.noise_frac,)

    def noise_for_stage(self, stage: int) -> float:
        seq = self._noise_seq()
        return seq[min(stage, len(seq)) - 1]


def _call_rng(seed: int, region: PixelBox, stage: int) -> np.random.Generator:
    # Derived from the call's inputs only, so concurrent callers cannot
    # perturb each other's draws.
    key = f"{seed}|{stage}|{region.x1!r}|{region.y1!r}|{region.x2!r}|{region.y2!r}"
    digest = hashlib.sha256(key.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def blob_center(spec: SyntheticModelSpec, region: PixelBox, stage: int) -> PixelPoint:
    """Global position of the attention peak the synthetic model produces."""
    if spec.gt_bbox is None:
        raise ValueError("synthetic spec has no gt_bbox")
    rng = _call_rng(spec.seed, region, stage)
    scale = spec.noise_for_stage(stage) * region.diagonal
    dx, dy = rng.normal(size=2) * scale
    c = spec.gt_bbox.center
    return PixelPoint(c.x + float(dx), c.y + float(dy))


def _patch_centers(grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    # vectorized equivalent of grid.patch_center
    xs = np.clip((np.arange(grid.cols) + 0.5) * grid.patch_px, 0.0, max(grid.image_w - 1, 0.0))
    ys = np.clip((np.arange(grid.rows) + 0.5) * grid.patch_px, 0.0, max(grid.image_h - 1, 0.0))
    return xs, ys


def synthetic_respond(spec: SyntheticModelSpec, image: ImageRef, region: PixelBox,
                      stage: int) -> ModelResponse:
    if not image.full_box.contains_box(region) or region.width <= 0 or region.height <= 0:
        raise BackendError(f"region {region.as_list()} is not inside the "
                           f"{image.width}x{image.height} image")
    mu = blob_center(spec, region, stage)
    grid = PatchGrid.covering(region.width, region.height, spec.patch_px)
    xs, ys = _patch_centers(grid)
    mx, my = mu.x - region.x1, mu.y - region.y1
    d2 = (xs[None, :] - mx) ** 2 + (ys[:, None] - my) ** 2
    logw = -d2 / (2 * spec.blob_sigma_px ** 2)
    # shift so the peak is exactly 1 even when the blob sits far off-region
    weights = np.exp(logw - logw.max())
    attn = AttentionMap(grid, weights)

    if spec.tool_policy == "oracle":
        pt = local_to_global(region, argmax_point(attn))
        decision = ToolCall.NO if point_in_box(pt, spec.gt_bbox) else ToolCall.YES
    elif spec.tool_policy == "always_yes":
        decision = ToolCall.YES
    elif spec.tool_policy == "always_no":
        decision = ToolCall.NO
    else:
        rng = _call_rng(spec.seed + 1, region, stage)
        decision = ToolCall.YES if rng.random() < spec.bernoulli_p else ToolCall.NO

    return ModelResponse(attn, decision, f"<tool_call>{decision.value}</tool_call>")


class SyntheticBackend:
    def __init__(self, spec: SyntheticModelSpec):
        if spec.gt_bbox is None:
            raise ValueError("SyntheticBackend needs a spec with gt_bbox")
        self.spec = spec

    def respond(self, image, region, instruction, stage):
        return synthetic_respond(self.spec, image, region, stage)


def sample_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}|{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class SyntheticBackendFactory:
    """Builds one synthetic backend per dataset sample from a template spec."""

    def __init__(self, template: SyntheticModelSpec):
        self.template = template

    def __call__(self, sample) -> SyntheticBackend:
        return SyntheticBackend(replace(
            self.template,
            gt_bbox=sample.gt_bbox,
            seed=sample_seed(self.template.seed, sample.id),
        ))


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------

class RecordedBackend:
    """Replays the responses stored in a trace, stage by stage."""

    def __init__(self, trace: StageTrace):
        self.trace = trace

    def respond(self, image, region, instruction, stage):
        if stage > len(self.trace.stages):
            raise BackendError(f"trace has no stage {stage}")
        rec = self.trace.stages[stage - 1]
        if rec.query_region != region:
            raise BackendError(
                f"stage {stage} queried {region.as_list()}, trace recorded "
                f"{rec.query_region.as_list()}")
        return rec.response


# --------------------------------------------------------------------------
# HTTP
# --------------------------------------------------------------------------

def expected_grid_shape(width: float, height: float, patch_px: int) -> tuple[int, int]:
    return math.ceil(height / patch_px), math.ceil(width / patch_px)


def parse_wire_response(payload, width: float, height: float) -> ModelResponse:
    """Validate a ``/ground`` reply body and convert it to a ModelResponse."""
    if not isinstance(payload, dict):
        raise SchemaViolation("reply is not a JSON object")
    for key in ("attention", "patch_px"):
        if key not in payload:
            raise SchemaViolation(f"reply is missing {key!r}")
    patch_px = payload["patch_px"]
    if not isinstance(patch_px, int) or isinstance(patch_px, bool) or patch_px < 1:
        raise SchemaViolation(f"patch_px must be a positive integer, got {patch_px!r}")

    attn = payload["attention"]
    if (not isinstance(attn, list) or not attn
            or not all(isinstance(row, list) and row for row in attn)):
        raise SchemaViolation("attention must be a non-empty list of non-empty rows")
    if len({len(row) for row in attn}) != 1:
        raise SchemaViolation("attention rows have unequal lengths")
    try:
        weights = np.asarray(attn, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SchemaViolation(f"attention is not numeric: {e}") from e

    want = expected_grid_shape(width, height, patch_px)
    if weights.shape != want:
        raise GridMismatch(
            f"attention grid {weights.shape[0]}x{weights.shape[1]} does not match "
            f"{width}x{height} region at patch {patch_px} (expected {want[0]}x{want[1]})")

    tool = payload.get("tool_call")
    if tool is None:
        decision = ToolCall.ABSENT
    elif tool in ("yes", "no"):
        decision = ToolCall(tool)
    else:
        raise SchemaViolation(f"tool_call must be 'yes', 'no' or null, got {tool!r}")

    raw_text = payload.get("raw_text", "")
    if not isinstance(raw_text, str):
        raise SchemaViolation("raw_text must be a string")

    try:
        grid = PatchGrid.covering(width, height, patch_px)
        return ModelResponse(AttentionMap(grid, weights), decision, raw_text)
    except AttentionError as e:
        raise SchemaViolation(str(e)) from e


def http_respond(endpoint: str, image_png: bytes, size: tuple[float, float],
                 instruction: str, stage: int, *, client: Optional[httpx.Client] = None,
                 timeout: float = 30.0) -> ModelResponse:
    """POST one region to ``{endpoint}/ground`` and validate the reply."""
    body = {
        "image_b64": base64.b64encode(image_png).decode("ascii"),
        "instruction": instruction,
        "stage": stage,
    }
    url = endpoint.rstrip("/") + "/ground"
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.post(url, json=body, timeout=timeout)
    except httpx.TimeoutException as e:
        raise BackendTimeout(f"timed out after {timeout}s waiting for {url}") from e
    except httpx.TransportError as e:
        raise BackendUnavailable(f"cannot reach {url}: {e}") from e
    finally:
        if own:
            client.close()

    if not resp.is_success:
        raise BackendStatusError(f"{url} returned HTTP {resp.status_code}")
    try:
        payload = resp.json()
    except ValueError as e:
        raise SchemaViolation(f"reply is not valid JSON: {e}") from e
    return parse_wire_response(payload, size[0], size[1])


def encode_region_png(path: str, region: PixelBox) -> bytes:
    from PIL import Image

    box = tuple(int(v) for v in region.as_list())
    with Image.open(path) as img:
        crop = img.convert("RGB").crop(box)
        buf = io.BytesIO()
        crop.save(buf, format="PNG")
    return buf.getvalue()


class HttpBackend:
    """Client for a remote attention server speaking the ``/ground`` protocol."""

    def __init__(self, endpoint: str, timeout: float = 30.0, max_in_flight: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self._client = httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def respond(self, image, region, instruction, stage):
        if image.path is None:
            raise BackendError("HTTP backend needs an image file path")
        try:
            png = encode_region_png(image.path, region)
        except OSError as e:
            raise BackendError(f"cannot read image {image.path}: {e}") from e
        with self._slots:
            return http_respond(self.endpoint, png, (region.width, region.height),
                                instruction, stage, client=self._client, timeout=self.timeout)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

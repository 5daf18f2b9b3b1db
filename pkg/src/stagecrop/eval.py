"""Benchmark harness: dataset loading, accuracy / tool-call-rate metrics,
easy/challenging labeling, and report rendering."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from .asc import AscConfig, ImageRef, StageTrace, ground
from .errors import GroundingError
from .grid import PixelBox, PixelPoint, clamp_box, point_in_box

log = logging.getLogger(__name__)

EASY, CHALLENGING, UNRESOLVED = "easy", "challenging", "unresolved"
DEFAULT_CATEGORY = "uncategorized"
REPORT_FORMATS = ("markdown", "csv", "json")
EMPTY_CELL = "—"


class DatasetError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{len(problems)} invalid row(s): {lines}{more}")


@dataclass(frozen=True)
class GroundingSample:
    id: str
    image: str
    image_w: int
    image_h: int
    instruction: str
    gt_bbox: PixelBox
    category: str = DEFAULT_CATEGORY
    # the row as read, so label output can pass unknown fields through
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def image_ref(self) -> ImageRef:
        return ImageRef(self.image_w, self.image_h, self.image or None)

    def to_row(self) -> dict:
        row = dict(self.raw) if self.raw else {
            "id": self.id, "image": self.image, "image_w": self.image_w,
            "image_h": self.image_h, "instruction": self.instruction,
            "bbox": self.gt_bbox.as_list(), "category": self.category,
        }
        return row


def sample_from_row(row: dict) -> GroundingSample:
    if not isinstance(row, dict):
        raise ValueError("row is not a JSON object")
    missing = [k for k in ("id", "image_w", "image_h", "instruction", "bbox") if k not in row]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    w, h = row["image_w"], row["image_h"]
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in (w, h)):
        raise ValueError(f"image size must be positive numbers, got {w}x{h}")
    instruction = row["instruction"]
    if not isinstance(instruction, str) or not instruction.strip():
        raise ValueError("instruction must be a non-empty string")
    bbox = row["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise ValueError("bbox must be [x1, y1, x2, y2]")
    box = PixelBox.from_seq(bbox)  # raises on x1 > x2 / y1 > y2
    if box.x2 < 0 or box.y2 < 0 or box.x1 > w or box.y1 > h:
        raise ValueError(f"bbox {bbox} lies outside the {w}x{h} image")
    return GroundingSample(
        id=str(row["id"]),
        image=str(row.get("image") or ""),
        image_w=w,
        image_h=h,
        instruction=instruction,
        gt_bbox=clamp_box(box, w, h),
        category=str(row.get("category") or DEFAULT_CATEGORY),
        raw=row,
    )


def parse_dataset(lines: Iterable[str], strict: bool = True) -> tuple[list[GroundingSample], list[tuple[int, str]]]:
    samples, problems, seen = [], [], set()
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            sample = sample_from_row(json.loads(line))
            if sample.id in seen:
                raise ValueError(f"duplicate id {sample.id!r}")
        except ValueError as e:  # JSONDecodeError is a ValueError
            problems.append((n, str(e)))
            continue
        seen.add(sample.id)
        samples.append(sample)
    if problems:
        if strict:
            raise DatasetError(problems)
        for n, msg in problems:
            log.warning("skipping line %d: %s", n, msg)
    return samples, problems


def load_dataset(path: Union[str, Path], strict: bool = True) -> list[GroundingSample]:
    """Read a JSONL dataset.

    Each row: ``{"id", "image", "image_w", "image_h", "instruction",
    "bbox": [x1, y1, x2, y2], "category"}``. In strict mode any invalid row
    raises :class:`DatasetError` listing every bad line; otherwise bad rows
    are logged and skipped.
    """
    with open(path, encoding="utf-8") as f:
        samples, _ = parse_dataset(f, strict=strict)
    return samples


def write_dataset(samples: Sequence[GroundingSample], path: Union[str, Path]):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_row()) + "\n")


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

BackendLike = Union[object, Callable[[GroundingSample], object]]


def _backend_for(backend: BackendLike, sample: GroundingSample):
    if hasattr(backend, "respond"):
        return backend
    return backend(sample)


@dataclass(frozen=True)
class Episode:
    sample_id: str
    category: str
    correct: bool
    stages_used: int
    final_point: Optional[PixelPoint]
    trace: Optional[StageTrace]
    error: Optional[str] = None
    error_kind: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"id": self.sample_id, "category": self.category, "correct": self.correct,
             "error": self.error, "error_kind": self.error_kind}
        if self.trace is not None:
            d.update(self.trace.to_dict(include_attention=False))
        else:
            d.update({"stages": [], "stages_used": 0, "final_point": None})
        return d


def run_episode(sample: GroundingSample, backend: BackendLike, cfg: AscConfig,
                fail_hard: bool = False, force_refine: bool = False) -> Episode:
    try:
        trace = ground(sample.image_ref, sample.instruction, _backend_for(backend, sample),
                       cfg, force_refine=force_refine)
    except GroundingError as e:
        if fail_hard:
            raise
        partial = e.trace
        return Episode(sample.id, sample.category, False,
                       partial.stages_used if partial else 0, None, partial,
                       error=str(e), error_kind=e.kind)
    correct = point_in_box(trace.final_point, sample.gt_bbox)
    return Episode(sample.id, sample.category, correct, trace.stages_used,
                   trace.final_point, trace)


def _run_all(dataset, fn, parallelism: int) -> list:
    if parallelism <= 1:
        return [fn(s) for s in dataset]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, dataset))


@dataclass(frozen=True)
class CategoryStats:
    name: str
    n: int = 0
    correct: int = 0
    multi_stage: int = 0
    stage_total: int = 0
    errors: int = 0

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.n if self.n else None

    @property
    def tool_call_rate(self) -> Optional[float]:
        return self.multi_stage / self.n if self.n else None

    @property
    def mean_stages(self) -> Optional[float]:
        return self.stage_total / self.n if self.n else None

    def add(self, ep: Episode) -> "CategoryStats":
        return replace(self, n=self.n + 1, correct=self.correct + int(ep.correct),
                       multi_stage=self.multi_stage + int(ep.stages_used >= 2),
                       stage_total=self.stage_total + ep.stages_used,
                       errors=self.errors + int(ep.error is not None))

    def to_dict(self) -> dict:
        return {"name": self.name, "n": self.n, "correct": self.correct,
                "multi_stage": self.multi_stage, "stage_total": self.stage_total,
                "errors": self.errors, "accuracy": self.accuracy,
                "tool_call_rate": self.tool_call_rate, "mean_stages": self.mean_stages}

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryStats":
        return cls(d["name"], d["n"], d["correct"], d["multi_stage"], d["stage_total"],
                   d.get("errors", 0))


@dataclass(frozen=True)
class EvalReport:
    name: str
    categories: tuple[CategoryStats, ...]
    overall: CategoryStats
    traces_ref: Optional[str] = None
    episodes: tuple[Episode, ...] = field(default=(), compare=False, repr=False)

    @property
    def accuracy(self) -> Optional[float]:
        return self.overall.accuracy

    @property
    def tool_call_rate(self) -> Optional[float]:
        return self.overall.tool_call_rate

    def category(self, name: str) -> CategoryStats:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"name": self.name, "categories": [c.to_dict() for c in self.categories],
                "overall": self.overall.to_dict(), "traces_ref": self.traces_ref}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["name"], tuple(CategoryStats.from_dict(c) for c in d["categories"]),
                   CategoryStats.from_dict(d["overall"]), d.get("traces_ref"))


def aggregate(episodes: Sequence[Episode], name: str = "adaptive",
              categories: Optional[Sequence[str]] = None) -> EvalReport:
    episodes = tuple(sorted(episodes, key=lambda e: e.sample_id))
    order = list(categories or [])
    for ep in episodes:
        if ep.category not in order:
            order.append(ep.category)
    stats = {c: CategoryStats(c) for c in order}
    overall = CategoryStats("Avg.")
    for ep in episodes:
        stats[ep.category] = stats[ep.category].add(ep)
        overall = overall.add(ep)
    return EvalReport(name, tuple(stats[c] for c in order), overall, episodes=episodes)


def evaluate(dataset: Sequence[GroundingSample], backend: BackendLike,
             asc_cfg: AscConfig = AscConfig(), *, parallelism: int = 1,
             fail_hard: bool = False, categories: Optional[Sequence[str]] = None,
             name: str = "adaptive") -> EvalReport:
    """Ground every sample and aggregate point-in-box accuracy per category.

    ``backend`` is either a backend shared by all samples or a callable that
    builds one per sample (e.g. :class:`SyntheticBackendFactory`). Backend
    failures count as misses unless ``fail_hard`` is set. Category order is
    ``categories`` first, then first appearance in ``dataset``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if categories is None:
        categories = list(dict.fromkeys(s.category for s in dataset))
    episodes = _run_all(dataset, lambda s: run_episode(s, backend, asc_cfg, fail_hard),
                        parallelism)
    return aggregate(episodes, name, categories)


def write_traces(report: EvalReport, path: Union[str, Path]):
    with open(path, "w", encoding="utf-8") as f:
        for ep in report.episodes:
            f.write(json.dumps(ep.to_dict(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# difficulty labeling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelResult:
    labels: dict  # sample id -> easy / challenging / unresolved
    counts: dict

    def kept(self, dataset: Sequence[GroundingSample], keep_unresolved: bool = False):
        for s in dataset:
            label = self.labels[s.id]
            if label != UNRESOLVED or keep_unresolved:
                yield s, label


def label_sample(sample: GroundingSample, backend: BackendLike, asc_cfg: AscConfig) -> str:
    single = run_episode(sample, backend, replace(asc_cfg, max_stages=1))
    if single.correct:
        return EASY
    refined = run_episode(sample, backend, replace(asc_cfg, max_stages=2), force_refine=True)
    return CHALLENGING if refined.correct else UNRESOLVED


def label_difficulty(dataset: Sequence[GroundingSample], backend: BackendLike,
                     asc_cfg: AscConfig = AscConfig(), *, parallelism: int = 1) -> LabelResult:
    """Label samples easy (right in one stage), challenging (right only after
    one crop) or unresolved (wrong either way).

    The two-stage pass always crops, whatever the tool-call decision says.
    """
    labels = _run_all(dataset, lambda s: label_sample(s, backend, asc_cfg), parallelism)
    by_id = {s.id: lab for s, lab in zip(dataset, labels)}
    counts = {EASY: 0, CHALLENGING: 0, UNRESOLVED: 0}
    for lab in labels:
        counts[lab] += 1
    return LabelResult(by_id, counts)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _pct(v: Optional[float]) -> str:
    return EMPTY_CELL if v is None else f"{100 * v:.1f}"


def _column_names(reports: Sequence[EvalReport]) -> list[str]:
    names: list[str] = []
    for r in reports:
        for c in r.categories:
            if c.name not in names:
                names.append(c.name)
    return names


def _render_markdown(reports: Sequence[EvalReport]) -> str:
    cols = _column_names(reports)
    # n is per column; reports over the same dataset share it, so take the first that has it
    def count(name):
        for r in reports:
            for c in r.categories:
                if c.name == name:
                    return c.n
        return 0

    header = ["Run"] + [f"{c} (n={count(c)})" for c in cols] + \
        [f"Avg. (n={reports[0].overall.n})", "Tool Call (%)", "Mean stages"]
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join(["---"] + ["---:"] * (len(header) - 1)) + " |"]
    for r in reports:
        by_name = {c.name: c for c in r.categories}
        cells = [r.name]
        for c in cols:
            cells.append(_pct(by_name[c].accuracy) if c in by_name else EMPTY_CELL)
        ms = r.overall.mean_stages
        cells += [_pct(r.overall.accuracy), _pct(r.overall.tool_call_rate),
                  EMPTY_CELL if ms is None else f"{ms:.2f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _render_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "category", "n", "correct", "accuracy", "tool_call_rate",
                "mean_stages", "errors"])

    def fmt(v):
        return "" if v is None else repr(v)

    for r in reports:
        for c in list(r.categories) + [r.overall]:
            w.writerow([r.name, c.name, c.n, c.correct, fmt(c.accuracy),
                        fmt(c.tool_call_rate), fmt(c.mean_stages), c.errors])
    return buf.getvalue()


def emit_report(report: Union[EvalReport, Sequence[EvalReport]], fmt: str = "markdown") -> str:
    """Render one or more runs. Columns: categories, then Avg., then tool-call rate."""
    reports = [report] if isinstance(report, EvalReport) else list(report)
    if not reports:
        raise ValueError("no reports to render")
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt == "markdown":
        return _render_markdown(reports)
    if fmt == "csv":
        return _render_csv(reports)
    if fmt == "json":
        return json.dumps({"runs": [r.to_dict() for r in reports]}, indent=2) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


def reports_from_json(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)["runs"]]

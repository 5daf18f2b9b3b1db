"""Command-line entry point.

    stagecrop ground IMAGE INSTRUCTION [--trace out.json]
    stagecrop eval DATASET --out-dir reports/ [--format md --format csv]
    stagecrop eval --preset hard --samples 500 --out-dir reports/ --single-stage-baseline
    stagecrop reward rollouts.jsonl --out scored.jsonl
    stagecrop label DATASET --out labeled.jsonl
    stagecrop simulate --preset mixed --samples 200 --out data.jsonl

Exit codes: 0 success, 1 validation error, 2 backend or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import simulate
from .asc import ImageRef, ground
from .config import ConfigError, EngineConfig, load_config
from .errors import BackendError, GroundingError
from .eval import (
    DatasetError,
    emit_report,
    evaluate,
    label_difficulty,
    load_dataset,
    write_traces,
)
from .grid import PixelBox, PixelPoint
from .backends import HttpBackend, SyntheticBackend
from .rewards import Rollout, group_advantages, reward_components

log = logging.getLogger("stagecrop")

EXIT_OK, EXIT_INVALID, EXIT_BACKEND = 0, 1, 2
_FORMAT_EXT = {"md": "md", "markdown": "md", "csv": "csv", "json": "json"}


class UsageError(ValueError):
    pass


def _round(v: float) -> int:
    # half-up, not banker's rounding
    return int(math.floor(v + 0.5))


def _resolve_config(args) -> EngineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.parallelism is not None:
        if args.parallelism < 1:
            raise ConfigError("--parallelism must be >= 1")
        cfg = replace(cfg, parallelism=args.parallelism)
    if args.strict is not None:
        cfg = replace(cfg, strict=args.strict)
    if getattr(args, "max_stages", None) is not None:
        cfg = replace(cfg, asc=replace(cfg.asc, max_stages=args.max_stages))
    return cfg


def _image_ref(args) -> ImageRef:
    path = Path(args.image)
    if args.image_size:
        try:
            w, h = (int(v) for v in args.image_size.lower().split("x"))
        except ValueError:
            raise UsageError(f"--image-size must look like 1920x1080, got {args.image_size!r}")
        return ImageRef(w, h, str(path) if path.exists() else None)
    from PIL import Image

    with Image.open(path) as img:
        w, h = img.size
    return ImageRef(w, h, str(path))


def cmd_ground(args) -> int:
    cfg = _resolve_config(args)
    image = _image_ref(args)
    if cfg.http is not None:
        backend = HttpBackend(cfg.http.endpoint, cfg.http.timeout_s, cfg.http.max_in_flight)
    else:
        spec = replace(cfg.synthetic, seed=cfg.seed)
        if args.gt_bbox:
            spec = replace(spec, gt_bbox=PixelBox.from_seq(args.gt_bbox))
        if spec.gt_bbox is None:
            raise ConfigError("the synthetic backend needs backend.synthetic.gt_bbox or --gt-bbox")
        backend = SyntheticBackend(spec)

    try:
        trace = ground(image, args.instruction, backend, cfg.asc)
    finally:
        if isinstance(backend, HttpBackend):
            backend.close()
    if args.trace:
        Path(args.trace).write_text(json.dumps(trace.to_dict(), indent=2) + "\n", encoding="utf-8")
    p: PixelPoint = trace.final_point
    print(f"{_round(p.x)} {_round(p.y)} stages={trace.stages_used}")
    return EXIT_OK


def _dataset_and_backend(args, cfg: EngineConfig):
    if args.preset:
        if args.dataset:
            raise UsageError("give either a dataset or --preset, not both")
        dataset = simulate.generate_dataset(args.samples, cfg.seed, args.preset)
        return dataset, simulate.backend_factory(args.preset, cfg.seed)
    if not args.dataset:
        raise UsageError("a dataset path or --preset is required")
    dataset = load_dataset(args.dataset, strict=cfg.strict)
    return dataset, cfg.backend_for_dataset()


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    dataset, backend = _dataset_and_backend(args, cfg)
    if not dataset:
        raise UsageError("dataset is empty")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    reports = [evaluate(dataset, backend, cfg.asc, parallelism=cfg.parallelism, name=args.name)]
    if args.single_stage_baseline:
        reports.append(evaluate(dataset, backend, replace(cfg.asc, max_stages=1),
                                parallelism=cfg.parallelism, name="single stage"))
    if isinstance(backend, HttpBackend):
        backend.close()

    reports[0] = replace(reports[0], traces_ref="traces.jsonl")
    write_traces(reports[0], out / "traces.jsonl")
    for fmt in dict.fromkeys(args.format or ["md"]):
        (out / f"report.{_FORMAT_EXT[fmt]}").write_text(emit_report(reports, fmt), encoding="utf-8")

    for r in reports:
        print(f"{r.name}: accuracy={r.accuracy:.4f} tool_call_rate={r.tool_call_rate:.4f} "
              f"n={r.overall.n}")
    return EXIT_OK


def _parse_rollout(row) -> Rollout:
    if not isinstance(row, dict):
        raise ValueError("row is not a JSON object")
    for key in ("raw_text", "point", "gt_bbox"):
        if key not in row:
            raise ValueError(f"missing field {key!r}")
    point = row["point"]
    if not isinstance(point, list) or len(point) != 2:
        raise ValueError("point must be [x, y]")
    if not isinstance(row["raw_text"], str):
        raise ValueError("raw_text must be a string")
    return Rollout(row["raw_text"], PixelPoint(float(point[0]), float(point[1])),
                   PixelBox.from_seq(row["gt_bbox"]))


def cmd_reward(args) -> int:
    cfg = _resolve_config(args)
    rows, problems = [], []
    with open(args.rollouts, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append((row, _parse_rollout(row)))
            except (ValueError, TypeError) as e:
                problems.append((n, str(e)))
    if problems:
        if cfg.strict:
            raise DatasetError(problems)
        for n, msg in problems:
            log.warning("skipping line %d: %s", n, msg)

    scored = [dict(row, **reward_components(r, cfg.rewards)) for row, r in rows]

    groups: dict = {}
    for idx, row in enumerate(scored):
        gid = row.get("group_id")
        if gid is None:
            log.warning("rollout %d has no group_id; advantage omitted", idx + 1)
            continue
        groups.setdefault(json.dumps(gid), []).append(idx)
    for gid, members in groups.items():
        if len(members) < 2:
            log.warning("group %s has a single rollout; advantage omitted", gid)
            continue
        adv = group_advantages([scored[i]["total_reward"] for i in members])
        for i, a in zip(members, adv):
            scored[i]["advantage"] = a

    text = "".join(json.dumps(row) + "\n" for row in scored)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _resolve_config(args)
    dataset, backend = _dataset_and_backend(args, cfg)
    result = label_difficulty(dataset, backend, cfg.asc, parallelism=cfg.parallelism)
    if isinstance(backend, HttpBackend):
        backend.close()

    lines = []
    for sample, label in result.kept(dataset, keep_unresolved=args.keep_unresolved):
        lines.append(json.dumps(dict(sample.to_row(), difficulty=label)) + "\n")
    Path(args.out).write_text("".join(lines), encoding="utf-8")

    total = len(dataset)
    parts = [f"{k}={v} ({100 * v / total:.1f}%)" if total else f"{k}={v}"
             for k, v in result.counts.items()]
    print(" ".join(parts) + f" total={total}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .eval import write_dataset

    seed = args.seed if args.seed is not None else 0
    write_dataset(simulate.generate_dataset(args.samples, seed, args.preset), args.out)
    print(f"wrote {args.samples} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="engine config JSON (see defaults.example.json)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--parallelism", type=int, default=None,
                        help="max samples evaluated concurrently")
    strict = common.add_mutually_exclusive_group()
    strict.add_argument("--strict", dest="strict", action="store_true", default=None,
                        help="abort on any invalid input row")
    strict.add_argument("--lenient", dest="strict", action="store_false",
                        help="skip invalid input rows with a warning")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stagecrop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ground", parents=[common], help="ground one instruction on one image")
    p.add_argument("image")
    p.add_argument("instruction")
    p.add_argument("--image-size", help="WxH; skips reading the image file")
    p.add_argument("--gt-bbox", type=float, nargs=4, metavar=("X1", "Y1", "X2", "Y2"),
                   help="target box for the synthetic backend")
    p.add_argument("--max-stages", type=int)
    p.add_argument("--trace", help="write the episode trace JSON here")
    p.set_defaults(func=cmd_ground)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a dataset"),
                                 ("label", cmd_label, "label samples easy/challenging")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("dataset", nargs="?")
        p.add_argument("--preset", choices=sorted(simulate.PRESETS),
                       help="use a generated synthetic benchmark instead of a dataset file")
        p.add_argument("--samples", type=int, default=500)
        p.add_argument("--max-stages", type=int)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--out-dir", required=True)
            p.add_argument("--format", action="append", choices=sorted(_FORMAT_EXT))
            p.add_argument("--name", default="adaptive", help="run name in the report")
            p.add_argument("--single-stage-baseline", action="store_true",
                           help="also report a forced single-stage run")
        else:
            p.add_argument("--out", required=True)
            p.add_argument("--keep-unresolved", action="store_true")

    p = sub.add_parser("reward", parents=[common], help="score rollouts")
    p.add_argument("rollouts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--preset", choices=sorted(simulate.PRESETS), default="hard")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except GroundingError as e:
        print(f"error: backend {e.kind}: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except BackendError as e:
        print(f"error: backend {e.kind}: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConfigError, DatasetError, UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())

import json
from dataclasses import replace
from pathlib import Path

import pytest

from stagecrop.asc import AscConfig
from stagecrop.backends import SyntheticBackend, SyntheticBackendFactory, SyntheticModelSpec, synthetic_respond
from stagecrop.eval import (
    CHALLENGING,
    EASY,
    UNRESOLVED,
    CategoryStats,
    DatasetError,
    EvalReport,
    aggregate,
    emit_report,
    evaluate,
    label_difficulty,
    load_dataset,
    reports_from_json,
    write_traces,
)
from stagecrop.grid import PixelBox, point_in_box
from stagecrop.simulate import backend_factory, generate_dataset

DATA = Path(__file__).parent / "data"


def write_rows(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


def row(i, bbox=(100, 100, 200, 150), category="Dev", **kw):
    d = {"id": f"s{i}", "image": f"img{i}.png", "image_w": 1920, "image_h": 1080,
         "instruction": "click the button", "bbox": list(bbox), "category": category}
    d.update(kw)
    return d


class TestLoadDataset:
    def test_valid(self, tmp_path):
        p = write_rows(tmp_path / "d.jsonl", [row(0), row(1), row(2, category="CAD")])
        ds = load_dataset(p)
        assert [s.id for s in ds] == ["s0", "s1", "s2"]
        assert ds[0].gt_bbox == PixelBox(100, 100, 200, 150)
        assert ds[2].category == "CAD"

    def test_inverted_box_reports_line(self, tmp_path):
        p = write_rows(tmp_path / "d.jsonl", [row(0), row(1, bbox=(300, 100, 200, 150))])
        with pytest.raises(DatasetError) as e:
            load_dataset(p)
        assert e.value.problems[0][0] == 2
        assert "line 2" in str(e.value)

    def test_lenient_skips(self, tmp_path, caplog):
        p = write_rows(tmp_path / "d.jsonl", [row(0), "{not json", row(2, instruction="  ")])
        assert [s.id for s in load_dataset(p, strict=False)] == ["s0"]
        assert "line 2" in caplog.text and "line 3" in caplog.text

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("")
        assert load_dataset(p) == []

    def test_box_clamped_to_image(self, tmp_path):
        p = write_rows(tmp_path / "d.jsonl", [row(0, bbox=(1900, 1000, 2000, 1100))])
        assert load_dataset(p)[0].gt_bbox == PixelBox(1900, 1000, 1920, 1080)

    def test_box_outside_image_rejected(self, tmp_path):
        p = write_rows(tmp_path / "d.jsonl", [row(0, bbox=(3000, 10, 3100, 20))])
        with pytest.raises(DatasetError):
            load_dataset(p)

    def test_duplicate_ids(self, tmp_path):
        p = write_rows(tmp_path / "d.jsonl", [row(0), row(0)])
        with pytest.raises(DatasetError, match="duplicate"):
            load_dataset(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_dataset(tmp_path / "nope.jsonl")


class ByIdFactory:
    """Synthetic backends whose tool policy is chosen per sample id."""

    def __init__(self, policies):
        self.policies = policies

    def __call__(self, sample):
        return SyntheticBackend(SyntheticModelSpec(
            gt_bbox=sample.gt_bbox, tool_policy=self.policies[sample.id]))


def ten_samples():
    return generate_dataset(10, seed=4, preset="easy")


class TestEvaluate:
    def test_noiseless_never_calls_tool(self):
        ds = generate_dataset(200, seed=1, preset="easy")
        r = evaluate(ds, backend_factory("easy", seed=1), AscConfig())
        assert r.accuracy == 1.0
        assert r.tool_call_rate == 0.0
        assert r.overall.n == 200

    def test_tool_call_rate_counts_multi_stage_episodes(self):
        ds = ten_samples()
        # hand-labeled: samples 0, 3, 5, 8 take a second stage
        multi = {ds[i].id for i in (0, 3, 5, 8)}
        factory = ByIdFactory({s.id: "always_yes" if s.id in multi else "always_no" for s in ds})
        r = evaluate(ds, factory, AscConfig())
        assert r.tool_call_rate == 0.4
        assert r.overall.multi_stage == 4
        assert {e.sample_id for e in r.episodes if e.stages_used == 2} == multi

    def test_single_stage_run_never_calls_tool(self):
        ds = generate_dataset(100, seed=2, preset="hard")
        r = evaluate(ds, backend_factory("hard", seed=2), AscConfig(max_stages=1))
        assert r.tool_call_rate == 0.0

    def test_adaptive_beats_single_stage_when_noisy(self):
        ds = generate_dataset(500, seed=3, preset="hard")
        f = backend_factory("hard", seed=3)
        adaptive = evaluate(ds, f, AscConfig())
        single = evaluate(ds, f, AscConfig(max_stages=1))
        assert adaptive.accuracy > single.accuracy

    def test_accuracy_matches_independent_pass_over_traces(self):
        ds = generate_dataset(300, seed=5, preset="mixed")
        r = evaluate(ds, backend_factory("mixed", seed=5), AscConfig())
        gt = {s.id: s.gt_bbox for s in ds}
        hits = [point_in_box(e.trace.final_point, gt[e.sample_id]) for e in r.episodes]
        assert r.accuracy == sum(hits) / len(hits)
        for c in r.categories:
            mine = [h for e, h in zip(r.episodes, hits) if e.category == c.name]
            assert c.n == len(mine) and c.correct == sum(mine)
        assert sum(c.n for c in r.categories) == len(ds)

    def test_parallel_matches_serial(self):
        ds = generate_dataset(120, seed=6, preset="mixed")
        f = backend_factory("mixed", seed=6)
        a = evaluate(ds, f, AscConfig(), parallelism=1)
        b = evaluate(ds, f, AscConfig(), parallelism=8)
        assert a == b
        assert [e.to_dict() for e in a.episodes] == [e.to_dict() for e in b.episodes]

    def test_backend_failures_count_as_misses(self):
        ds = ten_samples()

        class Broken:
            def respond(self, image, region, instruction, stage):
                from stagecrop.errors import BackendTimeout
                raise BackendTimeout("slow")

        r = evaluate(ds, Broken(), AscConfig())
        assert r.accuracy == 0.0
        assert r.overall.errors == 10
        assert r.episodes[0].error_kind == "timeout"

    def test_fail_hard(self):
        class Broken:
            def respond(self, *a):
                from stagecrop.errors import BackendTimeout
                raise BackendTimeout("slow")

        from stagecrop.errors import GroundingError
        with pytest.raises(GroundingError):
            evaluate(ten_samples(), Broken(), AscConfig(), fail_hard=True)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            evaluate([], backend_factory("easy"), AscConfig())

    def test_declared_categories_keep_order_and_empties(self):
        ds = ten_samples()
        r = evaluate(ds, backend_factory("easy"), AscConfig(), categories=["Robotics", "Dev"])
        assert [c.name for c in r.categories][:2] == ["Robotics", "Dev"]
        assert r.category("Robotics").n == 0
        assert r.category("Robotics").accuracy is None

    def test_traces_sorted_by_id(self, tmp_path):
        ds = list(reversed(ten_samples()))
        r = evaluate(ds, backend_factory("hard", seed=1), AscConfig(), parallelism=4)
        write_traces(r, tmp_path / "t.jsonl")
        lines = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert [d["id"] for d in lines] == sorted(s.id for s in ds)
        assert all("attention" not in st for d in lines for st in d["stages"])


class TestLabelDifficulty:
    def test_noiseless_all_easy(self):
        ds = generate_dataset(50, seed=1, preset="easy")
        res = label_difficulty(ds, backend_factory("easy", seed=1))
        assert res.counts == {EASY: 50, CHALLENGING: 0, UNRESOLVED: 0}

    def test_correct_only_after_crop_is_challenging(self):
        ds = generate_dataset(40, seed=8, preset="refine")
        template = SyntheticModelSpec(noise_frac=(0.03, 0.0), seed=8)
        factory = SyntheticBackendFactory(template)
        # keep samples whose stage-1 prediction misses, so the second stage decides
        missed = []
        for s in ds:
            b = factory(s)
            r = synthetic_respond(b.spec, s.image_ref, s.image_ref.full_box, 1)
            if r.tool_call.value == "yes":
                missed.append(s)
        assert missed
        res = label_difficulty(missed, factory)
        assert res.counts[EASY] == 0
        assert res.counts[CHALLENGING] > 0
        # a perfect second stage fails only when the crop misses the target entirely
        for s in missed:
            if res.labels[s.id] == UNRESOLVED:
                trace = evaluate([s], factory, AscConfig()).episodes[0].trace
                assert not trace.stages[1].query_region.contains_box(s.gt_bbox)

    def test_never_correct_is_unresolved(self):
        ds = generate_dataset(20, seed=2, preset="easy")

        def far_off(sample):
            # target the opposite corner so no stage can land on the real box
            wrong = PixelBox(0, 0, 10, 10) if sample.gt_bbox.x1 > 1000 else PixelBox(2540, 1420, 2550, 1430)
            return SyntheticBackend(SyntheticModelSpec(gt_bbox=wrong))

        res = label_difficulty(ds, far_off)
        assert res.counts[UNRESOLVED] == 20

    def test_partition(self):
        ds = generate_dataset(200, seed=3, preset="mixed")
        res = label_difficulty(ds, backend_factory("mixed", seed=3), parallelism=4)
        assert sum(res.counts.values()) == len(ds)
        assert set(res.labels) == {s.id for s in ds}
        kept = list(res.kept(ds))
        assert len(kept) == res.counts[EASY] + res.counts[CHALLENGING]


def fixture_report():
    dev = CategoryStats("Dev", n=4, correct=3, multi_stage=2, stage_total=6)
    cad = CategoryStats("CAD", n=2, correct=1, multi_stage=1, stage_total=3, errors=1)
    empty = CategoryStats("OS")
    overall = CategoryStats("Avg.", n=6, correct=4, multi_stage=3, stage_total=9, errors=1)
    return EvalReport("adaptive", (dev, cad, empty), overall, traces_ref="traces.jsonl")


class TestEmitReport:
    def test_markdown_golden(self):
        single = EvalReport("single stage",
                            (CategoryStats("Dev", 4, 2, 0, 4), CategoryStats("CAD", 2, 1, 0, 2),
                             CategoryStats("OS")),
                            CategoryStats("Avg.", 6, 3, 0, 6))
        got = emit_report([fixture_report(), single], "markdown")
        assert got == (DATA / "golden_report.md").read_text()

    def test_empty_category_renders_dash(self):
        md = emit_report(fixture_report(), "md")
        assert "OS (n=0)" in md
        assert md.splitlines()[2].split(" | ")[3] == "—"

    def test_csv(self):
        lines = emit_report(fixture_report(), "csv").splitlines()
        assert lines[0] == "run,category,n,correct,accuracy,tool_call_rate,mean_stages,errors"
        assert lines[1] == "adaptive,Dev,4,3,0.75,0.5,1.5,0"
        assert lines[3] == "adaptive,OS,0,0,,,,0"
        assert lines[4].startswith("adaptive,Avg.,6,4,")

    def test_json_round_trip(self):
        r = fixture_report()
        assert reports_from_json(emit_report(r, "json")) == [r]

    def test_round_trip_of_real_run(self):
        ds = generate_dataset(60, seed=2, preset="mixed")
        r = evaluate(ds, backend_factory("mixed", seed=2), AscConfig())
        assert reports_from_json(emit_report(r, "json")) == [replace(r, episodes=())]

    def test_deterministic_bytes(self):
        assert emit_report(fixture_report(), "json") == emit_report(fixture_report(), "json")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(fixture_report(), "xlsx")


def test_aggregate_category_order_is_first_appearance():
    r = aggregate([], categories=["b", "a"])
    assert [c.name for c in r.categories] == ["b", "a"]

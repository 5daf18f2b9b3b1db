"""Seeded synthetic benchmarks for exercising the engine offline.

Screens are 2560x1440 with small targets, roughly the regime of
professional high-resolution software screenshots. Presets pair a dataset
shape with a synthetic-model configuration:

* ``easy``: noiseless model; every stage-1 prediction lands on the target.
* ``hard``: stage-1 predictions usually miss; a crop recovers most of them.
* ``mixed``: moderate noise, a spread of easy/challenging/unresolved samples.
* ``refine``: stage-1 noise as in ``hard`` but a perfect second stage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backends import SyntheticBackendFactory, SyntheticModelSpec
from .eval import GroundingSample
from .grid import PixelBox

CATEGORIES = ("Dev", "Creative", "CAD", "Scientific", "Office", "OS")


@dataclass(frozen=True)
class Preset:
    name: str
    model: SyntheticModelSpec
    image_w: int = 2560
    image_h: int = 1440
    box_w: tuple[float, float] = (28, 112)
    box_h: tuple[float, float] = (28, 56)


PRESETS = {
    "easy": Preset("easy", SyntheticModelSpec(noise_frac=0.0, tool_policy="oracle")),
    "hard": Preset("hard", SyntheticModelSpec(noise_frac=0.02, tool_policy="oracle")),
    "mixed": Preset("mixed", SyntheticModelSpec(noise_frac=0.01, tool_policy="oracle")),
    "refine": Preset("refine", SyntheticModelSpec(noise_frac=(0.02, 0.0), tool_policy="oracle")),
}


def generate_dataset(n: int, seed: int = 0, preset: str | Preset = "hard") -> list[GroundingSample]:
    p = PRESETS[preset] if isinstance(preset, str) else preset
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n):
        bw = float(rng.uniform(*p.box_w))
        bh = float(rng.uniform(*p.box_h))
        x1 = float(rng.uniform(0, p.image_w - bw))
        y1 = float(rng.uniform(0, p.image_h - bh))
        box = PixelBox(round(x1, 1), round(y1, 1), round(x1 + bw, 1), round(y1 + bh, 1))
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        sid = f"{p.name}-{idx:05d}"
        samples.append(GroundingSample(
            id=sid,
            image="",
            image_w=p.image_w,
            image_h=p.image_h,
            instruction=f"click target {idx}",
            gt_bbox=box,
            category=cat,
            raw={"id": sid, "image": "", "image_w": p.image_w, "image_h": p.image_h,
                 "instruction": f"click target {idx}", "bbox": box.as_list(),
                 "category": cat},
        ))
    return samples


def backend_factory(preset: str | Preset, seed: int = 0, **overrides) -> SyntheticBackendFactory:
    p = PRESETS[preset] if isinstance(preset, str) else preset
    return SyntheticBackendFactory(replace(p.model, seed=seed, **overrides))

"""Engine configuration.

The config file is one JSON document whose keys mirror the dataclass fields.
Values are resolved as: command-line flag > config file > built-in default.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .arp import ArpConfig
from .asc import AscConfig
from .backends import HttpBackend, SyntheticBackendFactory, SyntheticModelSpec
from .grid import PixelBox
from .rewards import RewardConfig

DEFAULTS: dict[str, Any] = {
    "asc": {"max_stages": 2, "force_final_on_budget": True},
    "arp": {"tau": 0.3, "k": 20, "connectivity": 8, "min_crop_px": 448, "pad_px": 28},
    "rewards": {"alpha": 0.5, "sigma_floor_px": 1.0, "beta_kl": 0.04,
                "format_profile": "single_span"},
    "backend": {
        "synthetic": {"gt_bbox": None, "noise_frac": 0.0, "blob_sigma_px": 28.0,
                      "tool_policy": "oracle", "bernoulli_p": 0.5, "patch_px": 28},
    },
    "parallelism": 1,
    "seed": 0,
    "strict": True,
}

_HTTP_DEFAULTS = {"endpoint": None, "timeout_s": 30.0, "max_in_flight": 4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HttpSettings:
    endpoint: str
    timeout_s: float = 30.0
    max_in_flight: int = 4


@dataclass(frozen=True)
class EngineConfig:
    asc: AscConfig = field(default_factory=AscConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    synthetic: Optional[SyntheticModelSpec] = field(default_factory=SyntheticModelSpec)
    http: Optional[HttpSettings] = None
    parallelism: int = 1
    seed: int = 0
    strict: bool = True

    @property
    def arp(self) -> ArpConfig:
        return self.asc.arp

    def backend_for_dataset(self):
        """A backend (or per-sample factory) for running a whole dataset."""
        if self.http is not None:
            return HttpBackend(self.http.endpoint, self.http.timeout_s, self.http.max_in_flight)
        from dataclasses import replace

        return SyntheticBackendFactory(replace(self.synthetic, seed=self.seed))


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "backend":
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _build_backend(section: Any) -> tuple[Optional[SyntheticModelSpec], Optional[HttpSettings]]:
    if not isinstance(section, dict) or len(section) != 1:
        raise ConfigError("'backend' must have exactly one of 'synthetic' or 'http'")
    (kind, body), = section.items()
    if not isinstance(body, dict):
        raise ConfigError(f"backend.{kind} must be an object")
    if kind == "synthetic":
        vals = _merge(DEFAULTS["backend"]["synthetic"], body, "backend.synthetic.")
        gt = vals.pop("gt_bbox")
        noise = vals.pop("noise_frac")
        spec = SyntheticModelSpec(
            gt_bbox=PixelBox.from_seq(gt) if gt is not None else None,
            noise_frac=tuple(noise) if isinstance(noise, list) else noise,
            **vals,
        )
        return spec, None
    if kind == "http":
        vals = _merge(_HTTP_DEFAULTS, body, "backend.http.")
        if not vals["endpoint"]:
            raise ConfigError("backend.http.endpoint is required")
        return None, HttpSettings(vals["endpoint"], float(vals["timeout_s"]),
                                  int(vals["max_in_flight"]))
    raise ConfigError(f"unknown backend {kind!r}; expected 'synthetic' or 'http'")


def config_from_dict(doc: dict) -> EngineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    merged = _merge(DEFAULTS, doc)
    try:
        arp = ArpConfig(**merged["arp"])
        asc = AscConfig(arp=arp, **merged["asc"])
        rewards = RewardConfig(**merged["rewards"])
        synthetic, http = _build_backend(merged["backend"])
        parallelism = int(merged["parallelism"])
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return EngineConfig(asc, rewards, synthetic, http, parallelism,
                        int(merged["seed"]), bool(merged["strict"]))


def load_config(path: Union[str, Path, None]) -> EngineConfig:
    if path is None:
        return config_from_dict({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return config_from_dict(doc)

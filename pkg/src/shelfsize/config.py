"""Run configuration read from a single JSON file.

Relative paths are resolved against the directory holding the config file.
Example::

    {
      "seed": 0,
      "test_frac": 0.2,
      "paths": {"catalog": "data/catalog.json", "scenes": "data/scenes.jsonl",
                "models": "models", "reports": "reports"},
      "synthgen": {"n_groups": 6, "variants_per_group": [2, 3], "size_gap": 0.3,
                   "n_scenes": 500,
                   "scene": {"groups_per_scene": [4, 6], "boxes_per_group": [2, 5]},
                   "noise": {"sigma": 0.0, "outlier_prob": 0.0}},
      "pipeline": {"gbdt": {"n_rounds": 200}, "setnet": {"epochs": 300}}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .pipeline import PipelineConfig
from .synthgen import RNG_ALGORITHM, ConfigError, NoiseConfig, SceneConfig


@dataclass(frozen=True)
class SynthConfig:
    n_groups: int = 6
    variants_per_group: tuple[int, int] = (2, 3)
    size_gap: float = 0.3
    n_scenes: int = 500
    scene: SceneConfig = SceneConfig()
    noise: NoiseConfig = NoiseConfig()

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        algo = d.pop("rng_algorithm", RNG_ALGORITHM)
        if algo != RNG_ALGORITHM:
            raise ConfigError(f"unsupported rng_algorithm {algo!r}; this build uses {RNG_ALGORITHM}")
        scene = SceneConfig.from_dict(d.pop("scene", {}))
        noise = NoiseConfig.from_dict(d.pop("noise", {}))
        if "variants_per_group" in d:
            d["variants_per_group"] = tuple(d["variants_per_group"])
        return cls(scene=scene, noise=noise, **d)

    def to_dict(self) -> dict:
        return {"n_groups": self.n_groups, "variants_per_group": list(self.variants_per_group),
                "size_gap": self.size_gap, "n_scenes": self.n_scenes,
                "scene": self.scene.to_dict(), "noise": self.noise.to_dict(),
                "rng_algorithm": RNG_ALGORITHM}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    test_frac: float = 0.2
    paths: dict = field(default_factory=dict)
    synthgen: SynthConfig = SynthConfig()
    pipeline: PipelineConfig = PipelineConfig()
    base_dir: Path = Path(".")

    def path(self, key: str) -> Path:
        defaults = {"catalog": "data/catalog.json", "scenes": "data/scenes.jsonl",
                    "models": "models", "reports": "reports"}
        p = Path(self.paths.get(key, defaults[key]))
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test_frac": self.test_frac, "paths": dict(self.paths),
                "synthgen": self.synthgen.to_dict(), "pipeline": self.pipeline.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "seed" not in d:
            raise ConfigError("config needs an explicit integer 'seed'")
        unknown = set(d) - {"seed", "test_frac", "paths", "synthgen", "pipeline"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                seed=int(d["seed"]),
                test_frac=float(d.get("test_frac", 0.2)),
                paths=dict(d.get("paths", {})),
                synthgen=SynthConfig.from_dict(d.get("synthgen", {})),
                pipeline=PipelineConfig.from_dict(d.get("pipeline", {})),
                base_dir=base_dir,
            )
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        if not 0 < cfg.test_frac < 1:
            raise ConfigError("test_frac must lie strictly between 0 and 1")
        outputs = [cfg.path(k).resolve() for k in ("catalog", "scenes", "models", "reports")]
        if len(set(outputs)) != len(outputs):
            raise ConfigError("catalog, scenes, models and reports paths must be distinct")
        return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data, base_dir=path.parent)

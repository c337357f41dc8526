"""Seeded synthetic catalogs and shelf scenes.

Random streams use numpy's PCG64 bit generator.  Per-scene streams are derived
with ``SeedSequence([rng_seed, scene_index])`` so every scene can be produced
independently of the others and in any order.

Noise model: each box dimension is multiplied by ``1 + eps`` with
``eps ~ Normal(0, sigma^2)``; with probability ``outlier_prob`` both dimensions
are additionally multiplied by independent factors drawn uniformly from
``outlier_scale_range``.  All boxes of one scene share a single pixels-per-mm
scale drawn uniformly from ``scale_range``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .catalog import Catalog, DetectedBox, GroupSpec, Scene, VariantSpec

RNG_ALGORITHM = "PCG64/SeedSequence"


class ConfigError(ValueError):
    pass


def _pair(value, name, cast=float):
    try:
        lo, hi = value
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a (min, max) pair, got {value!r}") from None
    lo, hi = cast(lo), cast(hi)
    if lo > hi:
        raise ConfigError(f"{name}: min {lo} exceeds max {hi}")
    return lo, hi


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.0
    outlier_prob: float = 0.0
    outlier_scale_range: tuple[float, float] = (1.5, 3.0)
    scale_range: tuple[float, float] = (0.5, 3.0)

    def __post_init__(self):
        object.__setattr__(self, "outlier_scale_range",
                           _pair(self.outlier_scale_range, "outlier_scale_range"))
        object.__setattr__(self, "scale_range", _pair(self.scale_range, "scale_range"))
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ConfigError("outlier_prob must lie in [0, 1]")
        if self.outlier_scale_range[0] <= 0 or self.scale_range[0] <= 0:
            raise ConfigError("scale ranges must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class SceneConfig:
    groups_per_scene: tuple[int, int] = (4, 6)
    boxes_per_group: tuple[int, int] = (2, 5)
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "groups_per_scene",
                           _pair(self.groups_per_scene, "groups_per_scene", int))
        object.__setattr__(self, "boxes_per_group",
                           _pair(self.boxes_per_group, "boxes_per_group", int))
        if self.groups_per_scene[0] < 1 or self.boxes_per_group[0] < 1:
            raise ConfigError("scene ranges must start at 1 or more")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def derive_seed(rng_seed: int, index: int) -> int:
    """Independent 64-bit seed for item ``index`` of a stream rooted at ``rng_seed``."""
    state = np.random.SeedSequence([int(rng_seed) & (2**64 - 1), int(index)]).generate_state(
        1, np.uint64)
    return int(state[0])


def generate_catalog(n_groups: int, variants_per_group=(2, 3), size_gap: float = 0.3,
                     rng_seed: int = 0,
                     base_dims: Optional[Sequence[tuple[float, float]]] = None) -> Catalog:
    """Catalog of ``n_groups`` brands whose variants share one shape.

    Variant ``i`` of a group has linear dimensions ``(1 + size_gap) ** i`` times
    those of variant 0.  ``base_dims`` optionally pins variant 0's (w, h) in mm
    per group; otherwise they are drawn from the seeded stream.
    """
    if n_groups < 1:
        raise ConfigError("n_groups must be >= 1")
    if not size_gap > 0:
        raise ConfigError("size_gap must be > 0")
    vmin, vmax = _pair(variants_per_group, "variants_per_group", int)
    if vmin < 1:
        raise ConfigError("variants_per_group must start at 1 or more")
    if base_dims is not None and len(base_dims) != n_groups:
        raise ConfigError("base_dims needs one (w, h) pair per group")

    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) & (2**64 - 1)]))
    width = len(str(n_groups))
    groups = []
    for gi in range(n_groups):
        k = int(rng.integers(vmin, vmax + 1))
        w0 = round(float(rng.uniform(30.0, 120.0)), 1)
        h0 = round(w0 * float(rng.uniform(0.6, 3.0)), 1)
        if base_dims is not None:
            w0, h0 = map(float, base_dims[gi])
        gid = f"G{gi + 1:0{width}d}"
        variants = tuple(
            VariantSpec(f"{gid}-v{i + 1}", w0 * (1 + size_gap) ** i, h0 * (1 + size_gap) ** i)
            for i in range(k)
        )
        groups.append(GroupSpec(gid, variants))
    return Catalog(tuple(groups))


def generate_scene(catalog: Catalog, scene_cfg: SceneConfig, noise_cfg: NoiseConfig,
                   scene_seed: int, scene_id: str = "scene") -> Scene:
    """One fully labeled scene drawn from ``catalog``."""
    if not catalog.groups:
        raise ConfigError("catalog is empty")
    rng = np.random.default_rng(np.random.SeedSequence([int(scene_seed) & (2**64 - 1)]))
    n_groups = len(catalog.groups)
    gmin, gmax = scene_cfg.groups_per_scene
    gmin, gmax = min(gmin, n_groups), min(gmax, n_groups)
    k = int(rng.integers(gmin, gmax + 1))
    chosen = rng.choice(n_groups, size=k, replace=False)
    s = float(rng.uniform(*noise_cfg.scale_range))

    boxes = []
    for gi in chosen:
        group = catalog.groups[int(gi)]
        n_boxes = int(rng.integers(scene_cfg.boxes_per_group[0], scene_cfg.boxes_per_group[1] + 1))
        for _ in range(n_boxes):
            variant = group.variants[int(rng.integers(group.n_variants))]
            eps = rng.normal(0.0, 1.0, size=2) * noise_cfg.sigma
            # draws below are unconditional so the stream layout is fixed
            is_outlier = rng.random() < noise_cfg.outlier_prob
            factors = rng.uniform(*noise_cfg.outlier_scale_range, size=2)
            # keep dimensions positive under extreme negative draws
            fw = max(1.0 + eps[0], 1e-3)
            fh = max(1.0 + eps[1], 1e-3)
            w = variant.width_mm * s * fw
            h = variant.height_mm * s * fh
            if is_outlier:
                w *= float(factors[0])
                h *= float(factors[1])
            boxes.append(DetectedBox(f"{scene_id}-b{len(boxes):02d}", float(w), float(h),
                                     group.group_id, variant.class_id))
    return Scene(scene_id, tuple(boxes))


def generate_dataset(catalog: Catalog, scene_cfg: SceneConfig, noise_cfg: NoiseConfig,
                     n_scenes: int, rng_seed: Optional[int] = None) -> list[Scene]:
    """``n_scenes`` scenes with ids ``s00000``, ``s00001``, ...

    ``rng_seed`` defaults to ``scene_cfg.rng_seed``.
    """
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    seed = scene_cfg.rng_seed if rng_seed is None else rng_seed
    width = max(5, len(str(n_scenes - 1)))
    return [
        generate_scene(catalog, scene_cfg, noise_cfg, derive_seed(seed, i), f"s{i:0{width}d}")
        for i in range(n_scenes)
    ]

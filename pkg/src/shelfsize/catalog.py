"""Domain types for catalogs and shelf scenes, plus scale-invariant features.

Only relative quantities are derived from detector boxes: each box's own
aspect ratio (width / height) and the frontal-area ratio of every other box
in the same scene to the candidate box.  Absolute pixel sizes depend on the
camera distance and are never used downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence


class InvalidBoxError(ValueError):
    """Raised when a box has a non-positive width or height."""


class SchemaError(ValueError):
    """Raised when a catalog or scene file does not follow the expected layout.

    ``line`` is the 1-based line number for JSON Lines input, if known.
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class VariantSpec:
    class_id: str
    width_mm: float
    height_mm: float

    def __post_init__(self):
        if not (self.width_mm > 0 and self.height_mm > 0):
            raise ValueError(f"variant {self.class_id!r} needs positive dimensions")

    @property
    def area_mm2(self) -> float:
        return self.width_mm * self.height_mm


@dataclass(frozen=True)
class GroupSpec:
    group_id: str
    variants: tuple[VariantSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants:
            raise ValueError(f"group {self.group_id!r} has no variants")
        ids = [v.class_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class_id in group {self.group_id!r}")

    @property
    def n_variants(self) -> int:
        return len(self.variants)

    @property
    def class_ids(self) -> list[str]:
        return [v.class_id for v in self.variants]


@dataclass(frozen=True)
class Catalog:
    groups: tuple[GroupSpec, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        gids = [g.group_id for g in self.groups]
        if len(set(gids)) != len(gids):
            raise ValueError("duplicate group_id in catalog")
        cids = [c for g in self.groups for c in g.class_ids]
        if len(set(cids)) != len(cids):
            raise ValueError("class_id values must be unique across the catalog")
        object.__setattr__(self, "_by_id", {g.group_id: g for g in self.groups})

    @property
    def group_ids(self) -> list[str]:
        return [g.group_id for g in self.groups]

    def group(self, group_id: str) -> GroupSpec:
        try:
            return self._by_id[group_id]
        except KeyError:
            raise KeyError(f"unknown group {group_id!r}") from None

    def __contains__(self, group_id) -> bool:
        return group_id in self._by_id

    def n_variants(self, group_id: str) -> int:
        return self.group(group_id).n_variants

    def to_dict(self) -> dict:
        return {
            "groups": [
                {
                    "group_id": g.group_id,
                    "variants": [
                        {"class_id": v.class_id, "w_mm": v.width_mm, "h_mm": v.height_mm}
                        for v in g.variants
                    ],
                }
                for g in self.groups
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Catalog":
        try:
            groups = [
                GroupSpec(
                    str(g["group_id"]),
                    tuple(
                        VariantSpec(str(v["class_id"]), float(v["w_mm"]), float(v["h_mm"]))
                        for v in g["variants"]
                    ),
                )
                for g in data["groups"]
            ]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed catalog: {exc!r}") from exc
        return cls(tuple(groups))


@dataclass(frozen=True)
class DetectedBox:
    box_id: str
    width_px: float
    height_px: float
    group_id: str
    class_id: Optional[str] = None

    def scaled(self, s: float) -> "DetectedBox":
        return DetectedBox(self.box_id, self.width_px * s, self.height_px * s,
                           self.group_id, self.class_id)

    def to_dict(self) -> dict:
        return {"box_id": self.box_id, "w": self.width_px, "h": self.height_px,
                "group": self.group_id, "class": self.class_id}


@dataclass(frozen=True)
class Scene:
    scene_id: str
    boxes: tuple[DetectedBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def is_labeled(self) -> bool:
        return all(b.class_id is not None for b in self.boxes)

    def scaled(self, s: float) -> "Scene":
        """Same scene seen from another camera distance (uniform pixel rescale)."""
        return Scene(self.scene_id, tuple(b.scaled(s) for b in self.boxes))

    def unlabeled(self) -> "Scene":
        return Scene(self.scene_id, tuple(
            DetectedBox(b.box_id, b.width_px, b.height_px, b.group_id) for b in self.boxes))

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        try:
            boxes = tuple(
                DetectedBox(
                    str(b["box_id"]), float(b["w"]), float(b["h"]), str(b["group"]),
                    None if b.get("class") is None else str(b["class"]),
                )
                for b in data["boxes"]
            )
            return cls(str(data["scene_id"]), boxes)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed scene: {exc!r}") from exc


@dataclass(frozen=True)
class CandidateFeatures:
    """Own aspect ratio plus (area ratio, group) for every other box in the scene."""

    r: float
    context: tuple[tuple[float, str], ...]

    @property
    def area_ratios(self) -> list[float]:
        return [a for a, _ in self.context]


def _check_box(box: DetectedBox) -> None:
    if not (box.width_px > 0 and box.height_px > 0):
        raise InvalidBoxError(
            f"box {box.box_id!r} has non-positive dimension ({box.width_px} x {box.height_px})")


def aspect_ratio(box: DetectedBox) -> float:
    """Width over height of a box."""
    _check_box(box)
    return box.width_px / box.height_px


def frontal_area(box: DetectedBox) -> float:
    _check_box(box)
    return box.width_px * box.height_px


def extract_candidate_features(scene: Scene, candidate_index: int) -> CandidateFeatures:
    """Features of box ``candidate_index`` relative to the rest of its scene.

    Context entries keep scene order and exclude the candidate itself.
    """
    if not 0 <= candidate_index < len(scene.boxes):
        raise IndexError(f"candidate index {candidate_index} out of range for "
                         f"scene with {len(scene.boxes)} boxes")
    cand = scene.boxes[candidate_index]
    a_cand = frontal_area(cand)
    context = tuple(
        (frontal_area(other) / a_cand, other.group_id)
        for j, other in enumerate(scene.boxes) if j != candidate_index
    )
    return CandidateFeatures(aspect_ratio(cand), context)


@dataclass(frozen=True)
class Violation:
    box_id: Optional[str]
    kind: str
    detail: str = ""

    def __str__(self):
        where = f"box {self.box_id}: " if self.box_id is not None else ""
        return f"{where}{self.kind}" + (f" ({self.detail})" if self.detail else "")


def validate_scene(scene: Scene, catalog: Catalog) -> list[Violation]:
    """All problems found in ``scene``; an empty list means the scene is valid."""
    problems = []
    seen = set()
    for box in scene.boxes:
        if box.box_id in seen:
            problems.append(Violation(box.box_id, "duplicate box_id"))
        seen.add(box.box_id)
        if not (box.width_px > 0 and box.height_px > 0):
            problems.append(Violation(box.box_id, "non-positive dimension",
                                      f"{box.width_px} x {box.height_px}"))
        if box.group_id not in catalog:
            problems.append(Violation(box.box_id, "unknown group", box.group_id))
        elif box.class_id is not None and box.class_id not in catalog.group(box.group_id).class_ids:
            problems.append(Violation(box.box_id, "class not in group",
                                      f"{box.class_id} not in {box.group_id}"))
    return problems


# -- file formats -------------------------------------------------------------

def load_catalog(path) -> Catalog:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"catalog is not valid JSON: {exc}") from exc
    return Catalog.from_dict(data)


def save_catalog(catalog: Catalog, path) -> None:
    Path(path).write_text(json.dumps(catalog.to_dict(), indent=2) + "\n")


def iter_scenes(path) -> Iterator[Scene]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            try:
                yield Scene.from_dict(data)
            except SchemaError as exc:
                raise SchemaError(str(exc), line=lineno) from exc


def load_scenes(path) -> list[Scene]:
    return list(iter_scenes(path))


def dump_scenes(scenes: Iterable[Scene]) -> str:
    return "".join(json.dumps(s.to_dict()) + "\n" for s in scenes)


def save_scenes(scenes: Sequence[Scene], path) -> None:
    Path(path).write_text(dump_scenes(scenes))

"""Per-group training, scene inference, evaluation and bundle persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gbdt as gb
from . import setnet as sn
from .catalog import Catalog, Scene, dump_scenes, validate_scene
from .gmm import BankOptions, EmOptions, GmmFeatureBank, build_feature_bank
from .synthgen import derive_seed

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
METHODS = ("gbdt", "setnet")


class BundleError(ValueError):
    pass


class BundleVersionError(BundleError):
    pass


class InvalidSceneError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    bins: gb.BinOptions = gb.BinOptions()
    gbdt: gb.GbdtParams = gb.GbdtParams()
    bank: BankOptions = BankOptions()
    setnet: sn.SetNetParams = sn.SetNetParams()
    min_train_candidates: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            bins=gb.BinOptions.from_dict(d.get("bins", {})),
            gbdt=gb.GbdtParams.from_dict(d.get("gbdt", {})),
            bank=BankOptions.from_dict(d.get("bank", {})),
            setnet=sn.SetNetParams.from_dict(d.get("setnet", {})),
            min_train_candidates=int(d.get("min_train_candidates", 20)),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bins"]["range_percentiles"] = list(self.bins.range_percentiles)
        return d

    def seeded(self, seed: int) -> "PipelineConfig":
        return replace(
            self,
            gbdt=replace(self.gbdt, seed=seed),
            bank=replace(self.bank, em=replace(self.bank.em, seed=seed)),
            setnet=replace(self.setnet, seed=seed),
        )


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def config_hash(config: PipelineConfig) -> str:
    return _sha256(json.dumps(config.to_dict(), sort_keys=True))


def scenes_fingerprint(scenes: Sequence[Scene]) -> str:
    return _sha256(dump_scenes(scenes))


# -- splitting ----------------------------------------------------------------

def split_scenes(scenes: Sequence[Scene], test_frac: float, seed: int) -> tuple[list, list]:
    """Scene-level split; both halves keep the input order."""
    if not 0 < test_frac < 1:
        raise ValueError("test_frac must lie strictly between 0 and 1")
    n = len(scenes)
    if n < 2:
        raise ValueError("need at least 2 scenes to split")
    n_test = min(n - 1, max(1, int(round(test_frac * n))))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    test_idx = set(rng.permutation(n)[:n_test].tolist())
    train = [s for i, s in enumerate(scenes) if i not in test_idx]
    test = [s for i, s in enumerate(scenes) if i in test_idx]
    return train, test


# -- bundle -------------------------------------------------------------------

@dataclass
class ModelBundle:
    catalog: Catalog
    method: str
    artifacts: dict  # group_id -> {"spec": BinnedFeatureSpec, "model": GbdtModel} or {"model": SetNetModel}
    bank: Optional[GmmFeatureBank]
    provenance: dict
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        arts = {}
        for g, a in self.artifacts.items():
            entry = {"model": a["model"].to_dict()}
            if "spec" in a:
                entry["spec"] = a["spec"].to_dict()
            arts[g] = entry
        return {
            "version": BUNDLE_VERSION,
            "method": self.method,
            "catalog": self.catalog.to_dict(),
            "provenance": self.provenance,
            "artifacts": arts,
            "bank": None if self.bank is None else self.bank.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if not isinstance(d, dict) or "version" not in d:
            raise BundleError("bundle has no version field")
        if d["version"] != BUNDLE_VERSION:
            raise BundleVersionError(
                f"bundle version {d['version']!r} is not supported (expected {BUNDLE_VERSION})")
        try:
            method = d["method"]
            if method not in METHODS:
                raise BundleError(f"unknown method {method!r}")
            arts = {}
            for g, a in d["artifacts"].items():
                if method == "gbdt":
                    arts[g] = {"spec": gb.BinnedFeatureSpec.from_dict(a["spec"]),
                               "model": gb.GbdtModel.from_dict(a["model"])}
                else:
                    arts[g] = {"model": sn.SetNetModel.from_dict(a["model"])}
            bank = None if d.get("bank") is None else GmmFeatureBank.from_dict(d["bank"])
            return cls(Catalog.from_dict(d["catalog"]), method, arts, bank,
                       d["provenance"], d.get("diagnostics", {}))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, BundleError):
                raise
            raise BundleError(f"malformed bundle: {exc!r}") from exc


def dumps_bundle(bundle: ModelBundle) -> str:
    return json.dumps(bundle.to_dict(), indent=1) + "\n"


def save_bundle(bundle: ModelBundle, path) -> None:
    Path(path).write_text(dumps_bundle(bundle))


def load_bundle(path) -> ModelBundle:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"bundle is not valid JSON: {exc}") from exc
    return ModelBundle.from_dict(data)


# -- training -----------------------------------------------------------------

def _candidate_counts(scenes: Sequence[Scene]) -> dict:
    counts: dict = {}
    for s in scenes:
        for b in s.boxes:
            counts[b.group_id] = counts.get(b.group_id, 0) + 1
    return counts


def trainable_groups(train_scenes: Sequence[Scene], catalog: Catalog,
                     min_candidates: int) -> tuple[list, dict]:
    counts = _candidate_counts(train_scenes)
    groups, skipped = [], {}
    for g in catalog.groups:
        n = counts.get(g.group_id, 0)
        if g.n_variants < 2:
            skipped[g.group_id] = "single variant"
        elif n < min_candidates:
            skipped[g.group_id] = f"only {n} training candidates"
        else:
            groups.append(g.group_id)
    return groups, skipped


def train_bundle(train_scenes: Sequence[Scene], catalog: Catalog, method: str,
                 config: PipelineConfig = PipelineConfig(), seed: int = 0) -> ModelBundle:
    """Train one model per multi-variant group with enough labeled candidates."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    for s in train_scenes:
        if not s.is_labeled:
            raise ValueError(f"training scene {s.scene_id} has unlabeled boxes")
    config = config.seeded(seed)
    groups, skipped = trainable_groups(train_scenes, catalog, config.min_train_candidates)
    if not groups:
        raise ValueError("no group has enough training candidates to train a model")

    artifacts: dict = {}
    diagnostics: dict = {"skipped_groups": skipped, "training_loss": {}, "n_train_candidates": {}}
    bank = None
    if method == "gbdt":
        for g in groups:
            spec = gb.fit_bins(train_scenes, catalog, g, config.bins)
            X, y = [], []
            for s in train_scenes:
                idx, rows = gb.encode_scene(s, spec)
                X.extend(rows)
                y.extend(s.boxes[i].class_id for i in idx)
            model, hist = gb.train_gbdt(np.array(X), y, config.gbdt, target_group=g)
            artifacts[g] = {"spec": spec, "model": model}
            diagnostics["training_loss"][g] = hist
            diagnostics["n_train_candidates"][g] = len(y)
            log.info("gbdt %s: %d candidates, loss %.4f -> %.4f", g, len(y), hist[0], hist[-1])
    else:
        bank = build_feature_bank(train_scenes, catalog, config.bank)
        wanted = set(groups)
        per_group: dict = {g: ([], []) for g in groups}
        for s in train_scenes:
            for i, item_set in sorted(sn.scene_item_sets(s, bank, wanted).items()):
                b = s.boxes[i]
                per_group[b.group_id][0].append(item_set)
                per_group[b.group_id][1].append(b.class_id)
        for gi, g in enumerate(groups):
            sets, labels = per_group[g]
            group_seed = derive_seed(config.setnet.seed, gi)
            model = sn.init_setnet(catalog, g, config.setnet.hidden, group_seed)
            model, hist = sn.train_setnet(model, sets, labels,
                                          replace(config.setnet, seed=group_seed))
            artifacts[g] = {"model": model}
            diagnostics["training_loss"][g] = hist
            diagnostics["n_train_candidates"][g] = len(labels)
            log.info("setnet %s: %d candidates, loss %.4f -> %.4f", g, len(labels), hist[0], hist[-1])

    provenance = {
        "config_hash": config_hash(config),
        "seed": int(seed),
        "train_fingerprint": scenes_fingerprint(train_scenes),
        "config": config.to_dict(),
    }
    return ModelBundle(catalog, method, artifacts, bank, provenance, diagnostics)


# -- inference ----------------------------------------------------------------

@dataclass(frozen=True)
class BoxPrediction:
    box_id: str
    group_id: str
    predicted_class: Optional[str]
    probs: Optional[dict]
    status: str  # "model", "single-variant" or "no-model"

    def to_dict(self, scene_id: str) -> dict:
        return {"scene_id": scene_id, "box_id": self.box_id, "group": self.group_id,
                "predicted_class": self.predicted_class, "probs": self.probs,
                "status": self.status}


def _check_scene(scene: Scene, catalog: Catalog) -> None:
    problems = validate_scene(scene, catalog)
    if problems:
        raise InvalidSceneError(f"scene {scene.scene_id}: " + "; ".join(map(str, problems)))


def predict_scenes(bundle: ModelBundle, scenes: Sequence[Scene]) -> list[list[BoxPrediction]]:
    """Predictions for every box of every scene, batched per group model."""
    catalog = bundle.catalog
    for s in scenes:
        _check_scene(s, catalog)
    results: list = [[None] * len(s.boxes) for s in scenes]
    for si, s in enumerate(scenes):
        for bi, b in enumerate(s.boxes):
            group = catalog.group(b.group_id)
            if group.n_variants == 1:
                results[si][bi] = BoxPrediction(b.box_id, b.group_id, group.class_ids[0],
                                                {group.class_ids[0]: 1.0}, "single-variant")
            elif b.group_id not in bundle.artifacts:
                results[si][bi] = BoxPrediction(b.box_id, b.group_id, None, None, "no-model")

    wanted = set(bundle.artifacts)
    for g, art in bundle.artifacts.items():
        where, probs = [], None
        if bundle.method == "gbdt":
            rows = []
            for si, s in enumerate(scenes):
                idx, X = gb.encode_scene(s, art["spec"])
                where.extend((si, i) for i in idx)
                rows.append(X)
            if where:
                probs = art["model"].predict_proba(np.concatenate(rows))
        else:
            sets = []
            for si, s in enumerate(scenes):
                for i, item_set in sorted(sn.scene_item_sets(s, bundle.bank, {g}).items()):
                    where.append((si, i))
                    sets.append(item_set)
            if where:
                probs = sn.predict_sets(art["model"], sets)
        order = art["model"].class_order
        for (si, bi), p in zip(where, probs if probs is not None else []):
            b = scenes[si].boxes[bi]
            k = int(np.argmax(p))
            results[si][bi] = BoxPrediction(b.box_id, g, order[k],
                                            {c: float(v) for c, v in zip(order, p)}, "model")
    return results


def infer_scene(bundle: ModelBundle, scene: Scene) -> list[BoxPrediction]:
    return predict_scenes(bundle, [scene])[0]


# -- evaluation ---------------------------------------------------------------

@dataclass
class GroupEval:
    group_id: str
    n_test: int
    accuracy: float
    class_order: list
    confusion: np.ndarray  # rows: true class, columns: predicted class

    def to_dict(self) -> dict:
        return {"group_id": self.group_id, "n_test": self.n_test, "accuracy": self.accuracy,
                "class_order": self.class_order, "confusion": self.confusion.tolist()}


@dataclass
class EvalReport:
    method: str
    groups: list
    micro_accuracy: float
    macro_accuracy: float

    def by_group(self) -> dict:
        return {g.group_id: g for g in self.groups}

    def to_dict(self) -> dict:
        return {"version": 1, "method": self.method, "micro_accuracy": self.micro_accuracy,
                "macro_accuracy": self.macro_accuracy,
                "groups": [g.to_dict() for g in self.groups]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group_id", "n_test", f"accuracy_{self.method}"])
        for g in self.groups:
            writer.writerow([g.group_id, g.n_test, repr(g.accuracy)])
        return buf.getvalue()


def evaluate(bundle: ModelBundle, test_scenes: Sequence[Scene]) -> EvalReport:
    """Per-group accuracy and confusion over candidates that have a model."""
    preds = predict_scenes(bundle, test_scenes)
    per_group: dict = {}
    for s, ps in zip(test_scenes, preds):
        for b, p in zip(s.boxes, ps):
            if p.status != "model":
                continue
            if b.class_id is None:
                raise ValueError(f"test scene {s.scene_id} has unlabeled box {b.box_id}")
            per_group.setdefault(b.group_id, []).append((b.class_id, p.predicted_class))
    if not per_group:
        raise ValueError("no test candidate belongs to a group with a model")

    groups = []
    for g in bundle.catalog.group_ids:
        if g not in per_group:
            continue
        order = bundle.catalog.group(g).class_ids
        conf = np.zeros((len(order), len(order)), dtype=np.int64)
        for true, pred in per_group[g]:
            conf[order.index(true), order.index(pred)] += 1
        n = int(conf.sum())
        groups.append(GroupEval(g, n, float(np.trace(conf) / n), order, conf))
    total = sum(g.n_test for g in groups)
    micro = float(sum(np.trace(g.confusion) for g in groups) / total)
    macro = float(np.mean([g.accuracy for g in groups]))
    return EvalReport(bundle.method, groups, micro, macro)


# -- two-method comparison ----------------------------------------------------

@dataclass
class Comparison:
    rows: list  # (group_id, n_test, acc_gbdt or None, acc_setnet or None)
    reports: dict  # method -> EvalReport
    bundles: dict  # method -> ModelBundle
    failures: dict  # method -> error message

    def summary(self) -> dict:
        out = {"failures": self.failures, "n_groups": len(self.rows)}
        for m in METHODS:
            rep = self.reports.get(m)
            out[m] = None if rep is None else {"macro_accuracy": rep.macro_accuracy,
                                               "micro_accuracy": rep.micro_accuracy}
        paired = [(a, b) for _, _, a, b in self.rows if a is not None and b is not None]
        if paired:
            out["setnet_wins"] = sum(b > a for a, b in paired)
            out["gbdt_wins"] = sum(a > b for a, b in paired)
            out["ties"] = sum(a == b for a, b in paired)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group_id", "n_test", "acc_gbdt", "acc_setnet"])
        for g, n, a, b in self.rows:
            writer.writerow([g, n,
                             "failed" if a is None else repr(a),
                             "failed" if b is None else repr(b)])
        return buf.getvalue()


def compare_methods(train: Sequence[Scene], test: Sequence[Scene], catalog: Catalog,
                    config: PipelineConfig = PipelineConfig(), seed: int = 0) -> Comparison:
    """Train and evaluate both methods on one shared split.

    A failure in one method is recorded and the other still runs.
    """
    reports, bundles, failures = {}, {}, {}
    for method in METHODS:
        try:
            bundles[method] = train_bundle(train, catalog, method, config, seed)
            reports[method] = evaluate(bundles[method], test)
        except Exception as exc:  # noqa: BLE001 - surfaced in the report
            log.error("%s failed: %s", method, exc)
            failures[method] = f"{type(exc).__name__}: {exc}"
    ids = sorted({g.group_id for r in reports.values() for g in r.groups})
    rows = []
    for g in ids:
        per = {m: reports[m].by_group().get(g) for m in reports}
        n = next(e.n_test for e in per.values() if e is not None)
        rows.append((g, n,
                     per["gbdt"].accuracy if per.get("gbdt") else None,
                     per["setnet"].accuracy if per.get("setnet") else None))
    return Comparison(rows, reports, bundles, failures)

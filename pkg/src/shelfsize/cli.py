"""Command line entry point: ``shelfsize {gen,train,eval,infer,compare}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .catalog import SchemaError, iter_scenes, load_catalog, load_scenes, save_catalog, save_scenes
from .config import RunConfig, load_config
from .plotting import plot_comparison, plot_group_accuracy
from .synthgen import ConfigError, generate_catalog, generate_dataset

log = logging.getLogger("shelfsize")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _load_data(cfg: RunConfig):
    cat_path, scenes_path = cfg.path("catalog"), cfg.path("scenes")
    for p in (cat_path, scenes_path):
        if not p.exists():
            raise FileNotFoundError(f"missing input {p} (run 'shelfsize gen' first)")
    return load_catalog(cat_path), load_scenes(scenes_path)


def _split(cfg: RunConfig, scenes):
    return pl.split_scenes(scenes, cfg.test_frac, cfg.seed)


def _print_table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        print("  ".join(str(x).ljust(w) for x, w in zip(row, widths)))


def cmd_gen(cfg: RunConfig, args) -> int:
    sg = cfg.synthgen
    catalog = generate_catalog(sg.n_groups, sg.variants_per_group, sg.size_gap, rng_seed=cfg.seed)
    scenes = generate_dataset(catalog, replace(sg.scene, rng_seed=cfg.seed), sg.noise,
                              sg.n_scenes, rng_seed=cfg.seed)
    cat_path, scenes_path = cfg.path("catalog"), cfg.path("scenes")
    cat_path.parent.mkdir(parents=True, exist_ok=True)
    scenes_path.parent.mkdir(parents=True, exist_ok=True)
    save_catalog(catalog, cat_path)
    save_scenes(scenes, scenes_path)
    per_group = Counter(b.group_id for s in scenes for b in s.boxes)
    n_boxes = sum(len(s.boxes) for s in scenes)
    print(f"wrote {cat_path} ({len(catalog.groups)} groups) and {scenes_path}")
    print(f"scenes: {len(scenes)}  boxes: {n_boxes}")
    _print_table(["group", "variants", "boxes"],
                 [[g.group_id, g.n_variants, per_group.get(g.group_id, 0)] for g in catalog.groups])
    return EXIT_OK


def _bundle_path(cfg: RunConfig, method: str, override) -> Path:
    return Path(override) if override else cfg.path("models") / f"{method}.json"


def cmd_train(cfg: RunConfig, args) -> int:
    catalog, scenes = _load_data(cfg)
    train, _ = _split(cfg, scenes)
    bundle = pl.train_bundle(train, catalog, args.method, cfg.pipeline, cfg.seed)
    out = _bundle_path(cfg, args.method, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pl.save_bundle(bundle, out)
    print(f"trained {args.method} on {len(train)} scenes -> {out}")
    rows = [[g, bundle.diagnostics["n_train_candidates"][g],
             f"{bundle.diagnostics['training_loss'][g][0]:.4f}",
             f"{bundle.diagnostics['training_loss'][g][-1]:.4f}"] for g in bundle.artifacts]
    _print_table(["group", "n_train", "loss_start", "loss_end"], rows)
    for g, why in bundle.diagnostics["skipped_groups"].items():
        print(f"skipped {g}: {why}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    bundle_path = Path(args.bundle)
    if not bundle_path.exists():
        raise FileNotFoundError(f"missing bundle {bundle_path}")
    bundle = pl.load_bundle(bundle_path)
    _, scenes = _load_data(cfg)
    _, test = _split(cfg, scenes)
    report = pl.evaluate(bundle, test)
    out_dir = Path(args.out) if args.out else cfg.path("reports")
    stem = f"eval_{bundle.method}"
    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    doc["bundle_provenance"] = {k: v for k, v in bundle.provenance.items() if k != "config"}
    _write(out_dir / f"{stem}.json", _dump_json(doc))
    _write(out_dir / f"{stem}.csv", report.to_csv())
    plot_group_accuracy(report, out_dir / f"{stem}.png", title=f"{bundle.method} per-group accuracy")
    _print_table(["group", "n_test", "accuracy"],
                 [[g.group_id, g.n_test, f"{g.accuracy:.4f}"] for g in report.groups])
    print(f"macro accuracy {report.macro_accuracy:.4f}  micro accuracy {report.micro_accuracy:.4f}")
    print(f"reports written to {out_dir}")
    return EXIT_OK


def cmd_infer(cfg, args) -> int:
    bundle_path = Path(args.bundle)
    if not bundle_path.exists():
        raise FileNotFoundError(f"missing bundle {bundle_path}")
    bundle = pl.load_bundle(bundle_path)
    scenes = list(iter_scenes(args.scenes))
    lines = []
    for scene in scenes:
        for p in pl.infer_scene(bundle, scene):
            lines.append(json.dumps(p.to_dict(scene.scene_id)) + "\n")
    text = "".join(lines)
    if args.out:
        _write(Path(args.out), text)
        print(f"wrote {len(lines)} predictions to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    catalog, scenes = _load_data(cfg)
    train, test = _split(cfg, scenes)
    comp = pl.compare_methods(train, test, catalog, cfg.pipeline, cfg.seed)
    out_dir = Path(args.out) if args.out else cfg.path("reports")
    summary = comp.summary()
    summary["config"] = cfg.to_dict()
    summary["n_train_scenes"], summary["n_test_scenes"] = len(train), len(test)
    _write(out_dir / "comparison.csv", comp.to_csv())
    _write(out_dir / "comparison_summary.json", _dump_json(summary))
    plot_comparison(comp.rows, out_dir / "comparison.png", title="per-group test accuracy")
    fmt = lambda a: "failed" if a is None else f"{a:.4f}"  # noqa: E731
    _print_table(["group", "n_test", "acc_gbdt", "acc_setnet"],
                 [[g, n, fmt(a), fmt(b)] for g, n, a, b in comp.rows])
    for m in pl.METHODS:
        if summary.get(m):
            print(f"{m}: macro {summary[m]['macro_accuracy']:.4f}")
    for m, err in comp.failures.items():
        print(f"{m} failed: {err}", file=sys.stderr)
    print(f"reports written to {out_dir}")
    return EXIT_FAIL if len(comp.failures) == len(pl.METHODS) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shelfsize",
                                     description="Size-variant classification of shelf boxes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, config_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", required=config_required, help="run config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path (file or directory, per command)")
        return p

    add("gen", "generate a synthetic catalog and scenes")
    p = add("train", "train one method on the training split")
    p.add_argument("--method", required=True, choices=pl.METHODS)
    p = add("eval", "evaluate a bundle on the test split")
    p.add_argument("--bundle", required=True)
    p = add("infer", "predict classes for every box of a scenes file", config_required=False)
    p.add_argument("--bundle", required=True)
    p.add_argument("--scenes", required=True)
    add("compare", "train and evaluate both methods on one split")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed) if args.config else None
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (FileNotFoundError, pl.BundleError, pl.InvalidSceneError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest

from shelfsize.catalog import Catalog, GroupSpec, Scene, VariantSpec
from shelfsize.pipeline import (
    BUNDLE_VERSION,
    BundleError,
    BundleVersionError,
    InvalidSceneError,
    METHODS,
    ModelBundle,
    PipelineConfig,
    compare_methods,
    dumps_bundle,
    evaluate,
    infer_scene,
    load_bundle,
    predict_scenes,
    save_bundle,
    split_scenes,
    train_bundle,
)
from shelfsize.synthgen import NoiseConfig, SceneConfig, generate_dataset


@pytest.fixture(scope="module")
def bundles(small_catalog, small_split, fast_config):
    train, _ = small_split
    return {m: train_bundle(train, small_catalog, m, fast_config, seed=3) for m in METHODS}


def test_split_is_deterministic_partition(small_scenes):
    train, test = split_scenes(small_scenes, 0.25, 0)
    assert len(test) == 20 and len(train) == 60
    ids = [s.scene_id for s in small_scenes]
    assert sorted(s.scene_id for s in train + test) == sorted(ids)
    assert [s.scene_id for s in train] == [i for i in ids if i in {s.scene_id for s in train}]
    assert split_scenes(small_scenes, 0.25, 0) == (train, test)
    assert split_scenes(small_scenes, 0.25, 1)[1] != test


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_rejects_bad_fraction(small_scenes, frac):
    with pytest.raises(ValueError):
        split_scenes(small_scenes, frac, 0)


def test_pipeline_config_round_trip():
    cfg = PipelineConfig.from_dict({"gbdt": {"n_rounds": 7}, "setnet": {"hidden": 4},
                                    "bins": {"n_bins": 6}, "min_train_candidates": 3})
    assert cfg.gbdt.n_rounds == 7 and cfg.setnet.hidden == 4 and cfg.bins.n_bins == 6
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("method", METHODS)
def test_bundle_structure(bundles, small_catalog, method):
    b = bundles[method]
    d = b.to_dict()
    assert d["version"] == BUNDLE_VERSION and d["method"] == method
    assert set(d["artifacts"]) == set(small_catalog.group_ids)
    assert {"config_hash", "seed", "train_fingerprint", "config"} <= set(d["provenance"])
    assert (d["bank"] is None) == (method == "gbdt")
    for g, hist in b.diagnostics["training_loss"].items():
        assert all(np.isfinite(hist))
    if method == "gbdt":
        for hist in b.diagnostics["training_loss"].values():
            assert np.all(np.diff(hist) <= 1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_training_is_byte_reproducible(bundles, small_catalog, small_split, fast_config, method):
    again = train_bundle(small_split[0], small_catalog, method, fast_config, seed=3)
    assert dumps_bundle(again) == dumps_bundle(bundles[method])


def test_seed_changes_setnet(bundles, small_catalog, small_split, fast_config):
    other = train_bundle(small_split[0], small_catalog, "setnet", fast_config, seed=4)
    assert dumps_bundle(other) != dumps_bundle(bundles["setnet"])


def test_train_errors(small_catalog, small_split):
    with pytest.raises(ValueError):
        train_bundle(small_split[0], small_catalog, "svm")
    with pytest.raises(ValueError):
        train_bundle([s.unlabeled() for s in small_split[0]], small_catalog, "gbdt")
    with pytest.raises(ValueError):
        train_bundle(small_split[0][:1], small_catalog, "gbdt")


@pytest.mark.parametrize("method", METHODS)
def test_evaluate_contract(bundles, small_split, method):
    _, test = small_split
    rep = evaluate(bundles[method], test)
    assert rep.method == method
    for g in rep.groups:
        assert 0.0 <= g.accuracy <= 1.0
        assert g.confusion.sum() == g.n_test
        assert g.accuracy == np.trace(g.confusion) / g.n_test
    assert rep.macro_accuracy == pytest.approx(np.mean([g.accuracy for g in rep.groups]))
    total = sum(g.n_test for g in rep.groups)
    assert rep.micro_accuracy == pytest.approx(sum(np.trace(g.confusion) for g in rep.groups) / total)
    assert rep.macro_accuracy > 0.7
    assert rep.to_csv().splitlines()[0] == f"group_id,n_test,accuracy_{method}"
    assert len(rep.to_csv().splitlines()) == len(rep.groups) + 1


@pytest.mark.parametrize("method", METHODS)
def test_predictions_are_distributions(bundles, small_split, method):
    _, test = small_split
    unlabeled = [s.unlabeled() for s in test]
    for s, preds in zip(unlabeled, predict_scenes(bundles[method], unlabeled)):
        assert [p.box_id for p in preds] == [b.box_id for b in s.boxes]
        for p in preds:
            assert p.status == "model"
            assert sum(p.probs.values()) == pytest.approx(1.0)
            assert p.predicted_class == max(p.probs, key=p.probs.get)


@pytest.mark.parametrize("method", METHODS)
def test_predictions_scale_invariant(bundles, small_split, method):
    scene = small_split[1][0]
    a = infer_scene(bundles[method], scene)
    b = infer_scene(bundles[method], scene.scaled(0.1))
    for pa, pb in zip(a, b):
        assert pa.predicted_class == pb.predicted_class
        for c in pa.probs:
            assert pa.probs[c] == pytest.approx(pb.probs[c], abs=1e-9)


def test_invalid_scene_rejected(bundles, small_split):
    scene = small_split[1][0]
    bad = Scene(scene.scene_id, (scene.boxes[0].__class__("x", 1, 1, "NOPE"),) + scene.boxes)
    with pytest.raises(InvalidSceneError):
        infer_scene(bundles["gbdt"], bad)


@pytest.fixture(scope="module")
def mixed_catalog(small_catalog):
    extra = (GroupSpec("S", (VariantSpec("S-1", 30, 60),)),
             GroupSpec("U", (VariantSpec("U-1", 20, 20), VariantSpec("U-2", 26, 26))))
    return Catalog(small_catalog.groups + extra)


@pytest.mark.parametrize("method", METHODS)
def test_single_variant_and_no_model_markers(small_catalog, mixed_catalog, fast_config, method):
    # train without group U so it gets no model; S has one variant
    train_cat = Catalog(tuple(g for g in mixed_catalog.groups if g.group_id != "U"))
    train = generate_dataset(train_cat, SceneConfig(groups_per_scene=(2, 4)), NoiseConfig(sigma=0.02),
                             40, rng_seed=2)
    bundle = train_bundle(train, mixed_catalog, method, fast_config, seed=0)
    assert bundle.diagnostics["skipped_groups"]["S"] == "single variant"
    assert "U" in bundle.diagnostics["skipped_groups"]
    test = generate_dataset(mixed_catalog, SceneConfig(groups_per_scene=(5, 5)), NoiseConfig(sigma=0.02),
                            3, rng_seed=9)
    for s, preds in zip(test, predict_scenes(bundle, test)):
        for b, p in zip(s.boxes, preds):
            if b.group_id == "S":
                assert (p.status, p.predicted_class, p.probs) == ("single-variant", "S-1", {"S-1": 1.0})
            elif b.group_id == "U":
                assert (p.status, p.predicted_class, p.probs) == ("no-model", None, None)
            else:
                assert p.status == "model"
    rep = evaluate(bundle, test)
    assert {g.group_id for g in rep.groups} == set(small_catalog.group_ids)


@pytest.mark.parametrize("method", METHODS)
def test_bundle_save_load_same_predictions(small_catalog, fast_config, tmp_path, method):
    scenes = generate_dataset(small_catalog, SceneConfig(), NoiseConfig(sigma=0.05), 50, rng_seed=5)
    train, test = split_scenes(scenes, 0.2, 0)
    bundle = train_bundle(train, small_catalog, method, fast_config, seed=1)
    path = tmp_path / "b.json"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    a = predict_scenes(bundle, test)
    b = predict_scenes(loaded, test)
    assert a == b
    assert dumps_bundle(loaded) == path.read_text()


def test_corrupted_bundle(bundles, tmp_path):
    path = tmp_path / "b.json"
    path.write_text(dumps_bundle(bundles["gbdt"])[:-200])
    with pytest.raises(BundleError):
        load_bundle(path)
    d = bundles["gbdt"].to_dict()
    del d["artifacts"][next(iter(d["artifacts"]))]["spec"]
    with pytest.raises(BundleError):
        ModelBundle.from_dict(d)
    with pytest.raises(BundleError):
        ModelBundle.from_dict({"method": "gbdt"})


def test_bundle_version_mismatch(bundles):
    d = bundles["setnet"].to_dict()
    d["version"] = BUNDLE_VERSION + 1
    with pytest.raises(BundleVersionError):
        ModelBundle.from_dict(d)


def test_compare_methods(small_catalog, small_split, fast_config):
    train, test = small_split
    comp = compare_methods(train, test, small_catalog, fast_config, seed=3)
    assert comp.failures == {}
    assert [r[0] for r in comp.rows] == sorted(small_catalog.group_ids)
    lines = comp.to_csv().splitlines()
    assert lines[0] == "group_id,n_test,acc_gbdt,acc_setnet"
    assert len(lines) == len(small_catalog.groups) + 1
    s = comp.summary()
    assert s["gbdt_wins"] + s["setnet_wins"] + s["ties"] == len(comp.rows)


def test_compare_records_failure(small_catalog, small_split, fast_config):
    from dataclasses import replace
    from shelfsize.setnet import SetNetParams
    bad = replace(fast_config, setnet=SetNetParams(hidden=0, epochs=1))
    comp = compare_methods(*small_split, small_catalog, bad, seed=0)
    assert set(comp.failures) == {"setnet"}
    assert all(r[3] is None and r[2] is not None for r in comp.rows)
    assert "failed" in comp.to_csv()

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelfsize.catalog import Catalog, DetectedBox, GroupSpec, Scene, VariantSpec
from shelfsize.gbdt import (
    BinnedFeatureSpec,
    BinOptions,
    Block,
    GbdtModel,
    GbdtParams,
    encode_scene,
    fit_bins,
    predict_gbdt,
    train_gbdt,
)

CAT = Catalog((
    GroupSpec("A", (VariantSpec("A-1", 10, 10), VariantSpec("A-2", 20, 20))),
    GroupSpec("B", (VariantSpec("B-1", 10, 20),)),
    GroupSpec("C", (VariantSpec("C-1", 5, 5),)),
))


def scene(sid, *boxes):
    return Scene(sid, tuple(DetectedBox(f"{sid}-{i}", w, h, g, c) for i, (w, h, g, c) in enumerate(boxes)))


def test_bin_edges_hand_example():
    # candidate area 100; B areas 100..400 -> area ratios 1..4, aspect 0.25..1
    s = scene("s", (10, 10, "A", "A-1"), (10, 10, "B", "B-1"), (10, 40, "B", "B-1"),
              (20, 20, "B", "B-1"))
    spec = fit_bins([s], CAT, "A", BinOptions(n_bins=3, range_percentiles=(0, 100)))
    assert spec.included_groups == ("B",)
    aspect, area = spec.blocks
    assert (aspect.group_id, aspect.quantity) == ("B", "aspect_ratio")
    assert aspect.edges == pytest.approx([0.25, 0.5, 0.75, 1.0])
    assert area.quantity == "area_ratio"
    assert area.edges == pytest.approx([1.0, 2.0, 3.0, 4.0])
    assert spec.n_features == 1 + 3 + 3


def test_constant_column_gets_window():
    s = scene("s", (10, 10, "A", "A-1"), (10, 20, "B", "B-1"), (10, 20, "B", "B-1"))
    spec = fit_bins([s], CAT, "A", BinOptions(n_bins=2, range_percentiles=(0, 100)))
    edges = spec.blocks[0].edges
    assert edges[0] < 0.5 < edges[-1]
    assert np.all(np.diff(edges) > 0)


def test_cooccurrence_filter():
    scenes = [scene(f"s{i}", (10, 10, "A", "A-1"), (10, 20, "B", "B-1")) for i in range(99)]
    scenes.append(scene("rare", (10, 10, "A", "A-1"), (5, 5, "C", "C-1")))
    spec = fit_bins(scenes, CAT, "A", BinOptions(cooccur_min_frac=0.05))
    assert spec.included_groups == ("B",)
    spec = fit_bins(scenes, CAT, "A", BinOptions(cooccur_min_frac=0.01))
    assert spec.included_groups == ("B", "C")


def test_self_group_needs_two_boxes():
    lone = [scene(f"s{i}", (10, 10, "A", "A-1"), (10, 20, "B", "B-1")) for i in range(5)]
    assert "A" not in fit_bins(lone, CAT, "A").included_groups
    pairs = [scene(f"s{i}", (10, 10, "A", "A-1"), (20, 20, "A", "A-2")) for i in range(5)]
    assert fit_bins(pairs, CAT, "A").included_groups == ("A",)


def test_fit_bins_errors():
    with pytest.raises(ValueError):
        fit_bins([scene("s", (10, 20, "B", "B-1"))], CAT, "A")
    with pytest.raises(KeyError):
        fit_bins([], CAT, "Z")


HAND_SPEC = BinnedFeatureSpec("A", (
    Block("B", "aspect_ratio", np.array([0.0, 0.5, 1.0])),
    Block("B", "area_ratio", np.array([0.0, 1.5, 3.0])),
    Block("C", "aspect_ratio", np.array([0.0, 1.0, 2.0])),
    Block("C", "area_ratio", np.array([0.0, 1.0, 2.0])),
), ("B", "C"))


def test_encode_hand_example():
    # candidate 10x10 (r=1, area 100); B boxes: 10x20 (r .5, ratio 2), 10x40 (r .25, ratio 4)
    s = scene("s", (10, 10, "A", "A-1"), (10, 20, "B", "B-1"), (10, 40, "B", "B-1"))
    idx, X = encode_scene(s, HAND_SPEC)
    assert idx == [0]
    # r=.5 falls on an inner edge -> upper bin; ratio 4 clamps into last bin; C absent -> zeros
    assert X[0].tolist() == [1.0, 0.5, 0.5, 0.0, 1.0, 0, 0, 0, 0]


def test_encode_fixed_length_and_empty_context():
    idx, X = encode_scene(scene("s", (10, 10, "A", "A-1")), HAND_SPEC)
    assert X.shape == (1, HAND_SPEC.n_features)
    assert X[0].tolist() == [1.0] + [0.0] * 8
    idx, X = encode_scene(scene("s", (10, 20, "B", "B-1")), HAND_SPEC)
    assert idx == [] and X.shape == (0, HAND_SPEC.n_features)


def test_spec_round_trip():
    back = BinnedFeatureSpec.from_dict(json.loads(json.dumps(HAND_SPEC.to_dict())))
    assert back.included_groups == HAND_SPEC.included_groups
    s = scene("s", (10, 10, "A", "A-1"), (10, 20, "B", "B-1"), (3, 4, "C", "C-1"))
    assert np.array_equal(encode_scene(s, back)[1], encode_scene(s, HAND_SPEC)[1])


box_strat = st.tuples(st.floats(1, 100), st.floats(1, 100), st.sampled_from(["A", "B", "C"]))


@settings(max_examples=40, deadline=None)
@given(st.lists(box_strat, min_size=1, max_size=8), st.sampled_from([0.1, 7.3]), st.randoms())
def test_encode_scale_and_order_invariant(boxes, s, rnd):
    sc = scene("s", (10, 10, "A", None), *[(w, h, g, None) for w, h, g in boxes])
    idx, X = encode_scene(sc, HAND_SPEC)
    _, Xs = encode_scene(sc.scaled(s), HAND_SPEC)
    assert np.allclose(X, Xs, rtol=1e-9, atol=1e-12)
    perm = list(range(len(sc.boxes)))
    rnd.shuffle(perm)
    shuffled = Scene("s", tuple(sc.boxes[i] for i in perm))
    pidx, Xp = encode_scene(shuffled, HAND_SPEC)
    by_id = {sc.boxes[i].box_id: X[k] for k, i in enumerate(idx)}
    for k, i in enumerate(pidx):
        assert np.allclose(Xp[k], by_id[shuffled.boxes[i].box_id], rtol=1e-12, atol=0)


# -- boosting -------------------------------------------------------------------

def toy(n=200, seed=0, k=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 3))
    y = [f"c{int(v)}" for v in np.minimum((X[:, 1] * k).astype(int), k - 1)]
    return X, y


def test_separable_toy_perfect_within_10_rounds():
    X, y = toy()
    model, hist = train_gbdt(X, y, GbdtParams(n_rounds=10, max_depth=1, learning_rate=1.0))
    pred = np.array(model.class_order)[model.predict_proba(X).argmax(axis=1)]
    assert np.mean(pred == np.array(y)) == 1.0


def test_three_class_toy():
    X, y = toy(k=3, seed=1)
    model, _ = train_gbdt(X, y, GbdtParams(n_rounds=30))
    pred = np.array(model.class_order)[model.predict_proba(X).argmax(axis=1)]
    assert np.mean(pred == np.array(y)) == 1.0
    assert np.allclose(model.predict_proba(X).sum(axis=1), 1.0)


def test_single_class_model():
    X = np.random.default_rng(0).normal(size=(10, 4))
    model, hist = train_gbdt(X, ["only"] * 10)
    assert model.class_order == ["only"]
    assert predict_gbdt(model, X[0]).tolist() == [1.0]


def test_loss_history_monotone():
    for seed in range(5):
        X, y = toy(seed=seed, k=3)
        y = [v if i % 7 else "c0" for i, v in enumerate(y)]  # label noise
        _, hist = train_gbdt(X, y, GbdtParams(n_rounds=50, learning_rate=0.5, min_leaf=1))
        assert np.all(np.diff(hist) <= 1e-12)


def test_zero_rounds_predict_base_rates():
    X, y = toy(n=100)
    model, hist = train_gbdt(X, y, GbdtParams(n_rounds=0))
    freq = [y.count(c) / len(y) for c in model.class_order]
    assert predict_gbdt(model, X[0]) == pytest.approx(freq)
    assert len(hist) == 1


def test_zero_tree_balanced_is_uniform():
    X = np.arange(8, dtype=float).reshape(4, 2)
    model, _ = train_gbdt(X, ["a", "b", "a", "b"], GbdtParams(n_rounds=0))
    assert predict_gbdt(model, X[0]).tolist() == [0.5, 0.5]


def test_input_validation():
    X, y = toy(n=20)
    with pytest.raises(ValueError):
        train_gbdt(X, y[:-1])
    model, _ = train_gbdt(X, y, GbdtParams(n_rounds=2))
    with pytest.raises(ValueError):
        predict_gbdt(model, np.zeros(5))


def test_depth_and_min_leaf_respected():
    X, y = toy(k=3)
    model, _ = train_gbdt(X, y, GbdtParams(n_rounds=5, max_depth=2, min_leaf=7))
    for ens in model.trees:
        for t in ens:
            assert t.depth <= 2
            leaves = t.predict(X)
            _, counts = np.unique(leaves, return_counts=True)
            assert counts.min() >= 7 or len(counts) == 1


def walk_json(nodes, x):
    i = 0
    while "value" not in nodes[i]:
        nd = nodes[i]
        i = nd["left"] if x[nd["feature"]] <= nd["threshold"] else nd["right"]
    return nodes[i]["value"]


def oracle_proba(doc, x):
    """Independent scorer over the serialised model."""
    F = np.array(doc["base_scores"], dtype=float)
    for c, ens in enumerate(doc["trees"]):
        for nodes in ens:
            F[c] += doc["learning_rate"] * walk_json(nodes, x)
    e = np.exp(F - F.max())
    return e / e.sum()


def test_predictions_match_independent_tree_walk():
    X, y = toy(k=3, seed=4)
    model, _ = train_gbdt(X, y, GbdtParams(n_rounds=15))
    doc = json.loads(json.dumps(model.to_dict()))
    Xt = np.random.default_rng(9).uniform(-0.2, 1.2, size=(100, 3))
    for x in Xt:
        assert np.allclose(predict_gbdt(model, x), oracle_proba(doc, x), rtol=1e-12, atol=1e-15)


def test_model_round_trip_bit_exact():
    X, y = toy(k=3, seed=5)
    model, _ = train_gbdt(X, y, GbdtParams(n_rounds=10))
    back = GbdtModel.from_dict(json.loads(json.dumps(model.to_dict())))
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))
    assert json.dumps(back.to_dict()) == json.dumps(model.to_dict())


def test_training_deterministic():
    X, y = toy(k=3)
    a, _ = train_gbdt(X, y, GbdtParams(n_rounds=10))
    b, _ = train_gbdt(X, y, GbdtParams(n_rounds=10))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_end_to_end_on_synthetic_scenes(small_catalog, small_split):
    train, test = small_split
    g = small_catalog.groups[0].group_id
    spec = fit_bins(train, small_catalog, g)
    rows, labels = [], []
    for s in train:
        idx, X = encode_scene(s, spec)
        rows.append(X)
        labels += [s.boxes[i].class_id for i in idx]
    model, hist = train_gbdt(np.vstack(rows), labels, GbdtParams(n_rounds=30), g)
    assert hist[-1] < hist[0]
    correct = total = 0
    for s in test:
        idx, X = encode_scene(s, spec)
        if not idx:
            continue
        pred = np.array(model.class_order)[model.predict_proba(X).argmax(axis=1)]
        correct += sum(p == s.boxes[i].class_id for p, i in zip(pred, idx))
        total += len(idx)
    assert correct / total > 0.8

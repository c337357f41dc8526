"""Permutation-invariant classifier over GMM-posterior context items.

Every other box in the scene becomes one item ``(area_ratio, own_r,
posteriors...)``.  Items pass through a tanh encoder chosen by the other
box's group, the encodings are averaged, and a final affine layer plus
softmax gives the candidate's class distribution.  Gradients are derived by
hand; :func:`grad_check` compares them with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .catalog import Catalog, Scene
from .gmm import GmmFeatureBank, class_posteriors_many

FALLBACK = "*"


@dataclass(frozen=True)
class SetFeatureItem:
    other_group: str
    area_ratio: float
    own_r: float
    posteriors: tuple[float, ...]

    def vector(self) -> np.ndarray:
        return np.array([self.area_ratio, self.own_r, *self.posteriors], dtype=float)


@dataclass(frozen=True)
class ItemSet:
    """Array form of a candidate's items: one feature row per context box."""

    groups: tuple[str, ...]
    features: np.ndarray

    @classmethod
    def from_items(cls, items: Sequence[SetFeatureItem], dim: Optional[int] = None) -> "ItemSet":
        if not items:
            return cls((), np.zeros((0, dim or 0)))
        return cls(tuple(it.other_group for it in items), np.array([it.vector() for it in items]))

    def items(self) -> list[SetFeatureItem]:
        return [SetFeatureItem(g, float(row[0]), float(row[1]), tuple(float(v) for v in row[2:]))
                for g, row in zip(self.groups, self.features)]

    def __len__(self):
        return len(self.groups)


def scene_item_sets(scene: Scene, bank: GmmFeatureBank,
                    groups: Optional[set] = None) -> dict[int, ItemSet]:
    """Item sets for every box in ``scene`` (or only boxes whose group is in ``groups``).

    Posterior queries are batched per (candidate group, context group) pair.
    """
    boxes = scene.boxes
    n = len(boxes)
    w = np.array([b.width_px for b in boxes])
    h = np.array([b.height_px for b in boxes])
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError(f"scene {scene.scene_id} has a box with non-positive dimension")
    r = w / h
    area = w * h
    gids = [b.group_id for b in boxes]
    wanted = [i for i in range(n) if groups is None or gids[i] in groups]

    # pending[(g, gw)] -> list of (candidate index, slot, area ratio)
    pending: dict = {}
    for i in wanted:
        slot = 0
        for j in range(n):
            if j == i:
                continue
            pending.setdefault((gids[i], gids[j]), []).append((i, slot, area[j] / area[i]))
            slot += 1

    out = {}
    for i in wanted:
        dim = 2 + len(bank.class_order[gids[i]])
        feats = np.empty((n - 1, dim))
        feats[:, 1] = r[i]
        out[i] = ItemSet(tuple(gids[j] for j in range(n) if j != i), feats)
    for (g, gw), entries in pending.items():
        cand = np.array([e[0] for e in entries])
        ratios = np.array([e[2] for e in entries])
        post = class_posteriors_many(bank, g, gw, np.column_stack([r[cand], ratios]))
        for (i, slot, ratio), p in zip(entries, post):
            row = out[i].features[slot]
            row[0] = ratio
            row[2:] = p
    return out


def assemble_set_features(scene: Scene, candidate_index: int,
                          bank: GmmFeatureBank) -> list[SetFeatureItem]:
    """One item per other box of the scene, in scene order."""
    if not 0 <= candidate_index < len(scene.boxes):
        raise IndexError(f"candidate index {candidate_index} out of range")
    g = scene.boxes[candidate_index].group_id
    sets = scene_item_sets(Scene(scene.scene_id, scene.boxes), bank, {g})
    return sets[candidate_index].items()


# -- model --------------------------------------------------------------------

@dataclass(frozen=True)
class SetNetParams:
    hidden: int = 32
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    l2: float = 1e-4
    fallback_rate: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "SetNetParams":
        return cls(**d)


@dataclass
class SetNetModel:
    target_group: str
    class_order: list
    encoder_keys: list  # context group ids, last entry is the fallback
    params: dict  # W_enc (E, H, D), b_enc (E, H), W_out (C, H), b_out (C,)
    untrained: set = field(default_factory=set)
    hyper: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    @property
    def input_dim(self) -> int:
        return self.params["W_enc"].shape[2]

    @property
    def hidden(self) -> int:
        return self.params["W_enc"].shape[1]

    def encoder_index(self, gw: str) -> int:
        if gw in self.untrained or gw not in self.encoder_keys:
            return len(self.encoder_keys) - 1
        return self.encoder_keys.index(gw)

    def to_dict(self) -> dict:
        p = self.params
        return {
            "target_group": self.target_group,
            "class_order": list(self.class_order),
            "encoders": {k: {"W": p["W_enc"][e].tolist(), "b": p["b_enc"][e].tolist()}
                         for e, k in enumerate(self.encoder_keys)},
            "encoder_order": list(self.encoder_keys),
            "output": {"W": p["W_out"].tolist(), "b": p["b_out"].tolist()},
            "untrained": sorted(self.untrained),
            "hyper": self.hyper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SetNetModel":
        keys = list(d["encoder_order"])
        params = {
            "W_enc": np.array([d["encoders"][k]["W"] for k in keys], dtype=float),
            "b_enc": np.array([d["encoders"][k]["b"] for k in keys], dtype=float),
            "W_out": np.asarray(d["output"]["W"], dtype=float),
            "b_out": np.asarray(d["output"]["b"], dtype=float),
        }
        return cls(d["target_group"], list(d["class_order"]), keys, params,
                   set(d.get("untrained", [])), d.get("hyper", {}))


def _xavier(rng, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_setnet(catalog: Catalog, target_group: str, H: int = 32, seed: int = 0) -> SetNetModel:
    """Fresh model with one encoder per catalog group plus a fallback encoder."""
    if H < 1:
        raise ValueError("hidden width must be >= 1")
    group = catalog.group(target_group)
    C = group.n_variants
    D = 2 + C
    keys = catalog.group_ids + [FALLBACK]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    params = {
        "W_enc": np.stack([_xavier(rng, H, D) for _ in keys]),
        "b_enc": np.zeros((len(keys), H)),
        "W_out": _xavier(rng, C, H),
        "b_out": np.zeros(C),
    }
    return SetNetModel(target_group, group.class_ids, keys, params)


@dataclass
class _Packed:
    """Items of consecutive sets, stored contiguously in set order."""

    X: np.ndarray
    enc: np.ndarray
    lens: np.ndarray

    @property
    def n_sets(self) -> int:
        return len(self.lens)


def _pack(model: SetNetModel, sets: Sequence[ItemSet]) -> _Packed:
    D = model.input_dim
    lens = np.array([len(s) for s in sets], dtype=np.int64)
    rows = [s.features for s in sets if len(s)]
    X = np.concatenate(rows).reshape(-1, D) if rows else np.zeros((0, D))
    if X.shape[1] != D:
        raise ValueError(f"items have {X.shape[1]} features, model expects {D}")
    routes = {}
    enc = np.array([routes.setdefault(g, model.encoder_index(g)) for s in sets for g in s.groups],
                   dtype=np.int64)
    return _Packed(X, enc, lens)


def _routed_inputs(X: np.ndarray, enc: np.ndarray, n_enc: int) -> np.ndarray:
    """Block layout ``[x in its encoder's slot | one-hot encoder]``.

    One matmul against the stacked encoder weights then applies each item's
    own encoder (other slots hold exact zeros).
    """
    n, D = X.shape
    Z = np.zeros((n, n_enc * D + n_enc))
    rows = np.arange(n)
    cols = enc[:, None] * D + np.arange(D)[None, :]
    Z[rows[:, None], cols] = X
    Z[rows, n_enc * D + enc] = 1.0
    return Z


def _stack(params) -> np.ndarray:
    W, b = params["W_enc"], params["b_enc"]
    E, H, D = W.shape
    return np.concatenate([W.transpose(1, 0, 2).reshape(H, E * D), b.T], axis=1)


def _segment_mean(h: np.ndarray, lens: np.ndarray) -> np.ndarray:
    out = np.zeros((len(lens), h.shape[1]))
    nz = lens > 0
    if nz.any():
        starts = np.concatenate([[0], np.cumsum(lens)[:-1]])[nz]
        out[nz] = np.add.reduceat(h, starts, axis=0) / lens[nz, None]
    return out


def _forward(params, pk: _Packed, Z: Optional[np.ndarray] = None):
    E = params["W_enc"].shape[0]
    if Z is None:
        Z = _routed_inputs(pk.X, pk.enc, E)
    h = np.tanh(Z @ _stack(params).T)
    pooled = _segment_mean(h, pk.lens)
    logits = pooled @ params["W_out"].T + params["b_out"]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return Z, h, pooled, z, probs


def _loss_and_grads(params, pk: _Packed, y: np.ndarray, l2: float, scale: float = 1.0,
                    Z: Optional[np.ndarray] = None):
    Z, h, pooled, z, probs = _forward(params, pk, Z)
    n = pk.n_sets
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    data_loss = -logp[np.arange(n), y].mean()
    penalty = 0.5 * l2 * (np.sum(params["W_enc"] ** 2) + np.sum(params["W_out"] ** 2))
    loss = scale * (data_loss + penalty)

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= scale / n
    grads = {
        "W_out": dlogits.T @ pooled + scale * l2 * params["W_out"],
        "b_out": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ params["W_out"]
    per_item = dpooled / np.maximum(pk.lens, 1)[:, None]
    dh = np.repeat(per_item, pk.lens, axis=0)
    dpre = dh * (1.0 - h * h)
    g_stack = dpre.T @ Z
    E, H, D = params["W_enc"].shape
    grads["W_enc"] = (g_stack[:, :E * D].reshape(H, E, D).transpose(1, 0, 2)
                      + scale * l2 * params["W_enc"])
    grads["b_enc"] = g_stack[:, E * D:].T.copy()
    return float(loss), grads


def forward(model: SetNetModel, items) -> np.ndarray:
    """Class probabilities for one candidate; ``items`` may be empty."""
    s = items if isinstance(items, ItemSet) else ItemSet.from_items(list(items), model.input_dim)
    return predict_sets(model, [s])[0]


def predict_sets(model: SetNetModel, sets: Sequence[ItemSet]) -> np.ndarray:
    if not sets:
        return np.zeros((0, model.n_classes))
    return _forward(model.params, _pack(model, sets))[4]


def _labels(model: SetNetModel, labels) -> np.ndarray:
    try:
        return np.array([model.class_order.index(c) if isinstance(c, str) else int(c)
                         for c in labels], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"label outside group {model.target_group!r}: {exc}") from None


def train_setnet(model: SetNetModel, sets: Sequence[ItemSet], labels,
                 hp: SetNetParams = SetNetParams()) -> tuple[SetNetModel, list[float]]:
    """Mini-batch SGD with momentum on mean cross-entropy plus L2 on weights.

    Returns a new model; ``model`` is left untouched.  Context groups never
    seen in training are routed to the fallback encoder afterwards.  During
    training a ``fallback_rate`` share of items is routed to the fallback
    encoder so it learns from every group.
    """
    if len(sets) == 0:
        raise ValueError("cannot train on an empty dataset")
    y = _labels(model, labels)
    if len(y) != len(sets):
        raise ValueError("sets and labels differ in length")
    if np.any((y < 0) | (y >= model.n_classes)):
        raise ValueError("label index out of range")

    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    work = SetNetModel(model.target_group, model.class_order, model.encoder_keys, params)
    full = _pack(work, sets)
    n_enc = len(model.encoder_keys)
    fallback = n_enc - 1
    lens = full.lens
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    rng = np.random.default_rng(np.random.SeedSequence([int(hp.seed), 1]))

    history = []
    n = len(sets)
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        reroute = rng.random(len(full.enc)) < hp.fallback_rate
        Z_epoch = _routed_inputs(full.X, np.where(reroute, fallback, full.enc), n_enc)
        total = 0.0
        for lo in range(0, n, hp.batch_size):
            batch = order[lo:lo + hp.batch_size]
            bl = lens[batch]
            item_idx = (np.repeat(starts[batch] - np.concatenate([[0], np.cumsum(bl)[:-1]]), bl)
                        + np.arange(bl.sum()))
            pk = _Packed(full.X[item_idx], full.enc[item_idx], bl)
            loss, grads = _loss_and_grads(params, pk, y[batch], hp.l2, Z=Z_epoch[item_idx])
            total += loss * len(batch)
            for k in params:
                velocity[k] = hp.momentum * velocity[k] - hp.lr * grads[k]
                params[k] += velocity[k]
        history.append(total / n)

    seen = {g for s in sets for g in s.groups}
    untrained = {k for k in model.encoder_keys[:-1] if k not in seen}
    hyper = {"hidden": model.hidden, "epochs": hp.epochs, "lr": hp.lr, "momentum": hp.momentum,
             "batch_size": hp.batch_size, "seed": hp.seed, "l2": hp.l2,
             "fallback_rate": hp.fallback_rate}
    trained = SetNetModel(model.target_group, list(model.class_order), list(model.encoder_keys),
                          params, untrained, hyper)
    return trained, history


def loss_and_grads(model: SetNetModel, sets: Sequence[ItemSet], labels, l2: float = 0.0,
                   scale: float = 1.0) -> tuple[float, dict]:
    """Training objective and its exact gradient for the given examples."""
    return _loss_and_grads(model.params, _pack(model, sets), _labels(model, labels), l2, scale)


def grad_check(model: SetNetModel, example: tuple, epsilon: float = 1e-5,
               l2: float = 0.0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``example`` is ``(items, label)``.  Every weight and bias is perturbed.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    items, label = example
    s = items if isinstance(items, ItemSet) else ItemSet.from_items(list(items), model.input_dim)
    pk = _pack(model, [s])
    y = _labels(model, [label])
    params = {k: v.copy() for k, v in model.params.items()}
    _, grads = _loss_and_grads(params, pk, y, l2)
    worst = 0.0
    for k, p in params.items():
        flat = p.reshape(-1)
        ga = grads[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = _loss_and_grads(params, pk, y, l2)
            flat[i] = orig - epsilon
            down, _ = _loss_and_grads(params, pk, y, l2)
            flat[i] = orig
            gn = (up - down) / (2.0 * epsilon)
            rel = abs(ga[i] - gn) / max(1e-12, abs(ga[i]) + abs(gn))
            worst = max(worst, rel)
    return worst

"""Two-dimensional Gaussian mixtures and the class-posterior feature bank.

The bank holds one mixture per (group, class, other group) triple, fitted on
``(r, a_other / a_candidate)`` pairs collected from labeled training scenes.
At inference it turns a single context pair into a posterior over the
candidate group's classes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .catalog import Catalog, Scene

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MISSING_LIKELIHOOD = 1e-12
UNDERFLOW_DENSITY = 1e-300
_LOG_MISSING = math.log(MISSING_LIKELIHOOD)
_LOG_UNDERFLOW = math.log(UNDERFLOW_DENSITY)


class DegenerateCovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class Gaussian2D:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov[0, 1] != cov[1, 0]:
            raise ValueError("covariance must be symmetric")
        if not (np.linalg.det(cov) > 0 and np.trace(cov) > 0):
            raise DegenerateCovarianceError(f"covariance is not positive definite: {cov.tolist()}")


@dataclass(frozen=True)
class Gmm2D:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        if not (len(w) == len(means) == len(covs) >= 1):
            raise ValueError("mixture needs matching, non-empty component arrays")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must lie in (0, 1] and sum to 1, got {w}")
        for k in range(len(w)):
            Gaussian2D(means[k], covs[k])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def components(self) -> list[tuple[float, Gaussian2D]]:
        return [(float(w), Gaussian2D(m, c)) for w, m, c in zip(self.weights, self.means, self.covs)]

    @classmethod
    def from_components(cls, components: Sequence[tuple[float, Gaussian2D]]) -> "Gmm2D":
        return cls(np.array([w for w, _ in components]),
                   np.array([g.mean for _, g in components]),
                   np.array([g.cov for _, g in components]))

    def to_list(self) -> list[dict]:
        return [{"w": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covs)]

    @classmethod
    def from_list(cls, items: list[dict]) -> "Gmm2D":
        return cls(np.array([c["w"] for c in items], dtype=float),
                   np.array([c["mean"] for c in items], dtype=float),
                   np.array([c["cov"] for c in items], dtype=float))


def _component_logpdf(X: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """(n, K) matrix of per-component Gaussian log-densities, 2x2 closed form."""
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise DegenerateCovarianceError("singular covariance in density evaluation")
    d0 = X[:, 0, None] - means[None, :, 0]
    d1 = X[:, 1, None] - means[None, :, 1]
    quad = (c * d0 * d0 - 2.0 * b * d0 * d1 + a * d1 * d1) / det
    return -LOG_2PI - 0.5 * np.log(det) - 0.5 * quad


def gaussian_logpdf(x, g: Gaussian2D) -> float:
    X = np.asarray(x, dtype=float).reshape(1, 2)
    return float(_component_logpdf(X, g.mean[None], g.cov[None])[0, 0])


def gaussian_pdf(x, g: Gaussian2D) -> float:
    """Bivariate normal density N(x | mean, cov)."""
    X = np.asarray(x, dtype=float).reshape(2)
    cov = g.cov
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not det > 0:
        raise DegenerateCovarianceError("singular covariance")
    d = X - g.mean
    quad = float(d @ np.linalg.solve(cov, d))
    return math.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))


def gmm_logpdf_many(X, m: Gmm2D) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    comp = _component_logpdf(X, m.means, m.covs) + np.log(m.weights)[None, :]
    top = comp.max(axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    return safe + np.log(np.exp(comp - safe[:, None]).sum(axis=1))


def gmm_pdf(x, m: Gmm2D) -> float:
    return float(sum(w * gaussian_pdf(x, g) for w, g in m.components))


# -- EM -----------------------------------------------------------------------

@dataclass(frozen=True)
class EmOptions:
    max_iters: int = 200
    tol: float = 1e-6
    reg_eps: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    min_support: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "EmOptions":
        return cls(**d)


@dataclass
class FitDiagnostics:
    log_likelihood: float
    iterations: int
    k_effective: int
    ll_history: list[float] = field(default_factory=list)
    pruned: int = 0


def _logsumexp_rows(a):
    top = a.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(a - top).sum(axis=1))


def _m_step(X, resp, reg_eps):
    nk = resp.sum(axis=0)
    nk_safe = np.maximum(nk, 1e-300)
    means = (resp.T @ X) / nk_safe[:, None]
    covs = np.empty((len(nk), 2, 2))
    for k in range(len(nk)):
        d = X - means[k]
        covs[k] = (resp[:, k, None] * d).T @ d / nk_safe[k]
        covs[k, 0, 1] = covs[k, 1, 0] = 0.5 * (covs[k, 0, 1] + covs[k, 1, 0])
        covs[k] += reg_eps * np.eye(2)
    weights = nk / nk.sum()
    return weights, means, covs, nk


def _kmeanspp_centers(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return X[centers]


def _run_em(X, weights, means, covs, opts):
    """EM from the given parameters.

    The diagonal ridge makes each M-step inexact, so on nearly flat
    components an update can lower the likelihood; the run then stops and
    keeps the previous parameters.
    """
    history = []
    prev = None
    it = 0
    for it in range(1, opts.max_iters + 1):
        logp = _component_logpdf(X, means, covs) + np.log(np.maximum(weights, 1e-300))[None]
        norm = _logsumexp_rows(logp)
        ll = float(norm.sum())
        if history and ll < history[-1]:
            weights, means, covs, logp, norm = prev
            it -= 1
            break
        converged = bool(history) and abs(ll - history[-1]) <= opts.tol * abs(history[-1])
        history.append(ll)
        if converged or it == opts.max_iters:
            break
        prev = (weights, means, covs, logp, norm)
        resp = np.exp(logp - norm[:, None])
        weights, means, covs, _ = _m_step(X, resp, opts.reg_eps)
    resp = np.exp(logp - norm[:, None])
    return weights, means, covs, resp.sum(axis=0), history, it


def fit_gmm_em(points, k_max: int, opts: EmOptions = EmOptions()) -> tuple[Gmm2D, FitDiagnostics]:
    """Maximum-likelihood mixture with at most ``k_max`` components.

    Starts from k-means++ seeds, keeps the best of ``opts.n_restarts`` runs by
    final log-likelihood, and drops components supported by fewer than
    ``opts.min_support`` points (refitting from the pruned state).
    """
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(X)
    if n == 0:
        raise ValueError("cannot fit a mixture to zero points")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n_distinct = len(np.unique(X, axis=0))
    k = max(1, min(k_max, n_distinct, int(n // opts.min_support)))

    if k == 1:
        weights, means, covs, _ = _m_step(X, np.ones((n, 1)), opts.reg_eps)
        weights, means, covs, _, hist, iters = _run_em(
            X, weights, means, covs, EmOptions(max_iters=1, reg_eps=opts.reg_eps))
        return Gmm2D(np.array([1.0]), means, covs), FitDiagnostics(hist[-1], iters, 1, hist)

    best = None
    for restart in range(max(1, opts.n_restarts)):
        rng = np.random.default_rng(np.random.SeedSequence([int(opts.seed), restart]))
        centers = _kmeanspp_centers(X, k, rng)
        labels = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)
        resp = np.zeros((n, len(centers)))
        resp[np.arange(n), labels] = 1.0
        resp = resp[:, resp.sum(axis=0) > 0]
        weights, means, covs, _ = _m_step(X, resp, opts.reg_eps)
        weights, means, covs, mass, hist, iters = _run_em(X, weights, means, covs, opts)
        pruned = 0
        while len(weights) > 1 and np.any(mass < opts.min_support):
            keep = mass >= opts.min_support
            if not keep.any():
                keep = mass == mass.max()
            pruned += int((~keep).sum())
            weights = weights[keep] / weights[keep].sum()
            weights, means, covs, mass, hist, iters = _run_em(
                X, weights, means[keep], covs[keep], opts)
        if best is None or hist[-1] > best[4][-1]:
            best = (weights, means, covs, iters, hist, pruned)

    weights, means, covs, iters, hist, pruned = best
    weights = weights / weights.sum()
    order = np.lexsort((means[:, 0], means[:, 1]))
    model = Gmm2D(weights[order], means[order], covs[order])
    return model, FitDiagnostics(hist[-1], iters, model.n_components, hist, pruned)


# -- feature bank -------------------------------------------------------------

@dataclass(frozen=True)
class BankOptions:
    min_points: int = 10
    em: EmOptions = EmOptions()

    @classmethod
    def from_dict(cls, d: dict) -> "BankOptions":
        d = dict(d)
        em = EmOptions.from_dict(d.pop("em", {}))
        return cls(em=em, **d)


def _key(g, c, gw) -> str:
    return f"{g}|{c}|{gw}"


@dataclass
class GmmFeatureBank:
    entries: dict  # (g, c, gw) -> Gmm2D
    priors: dict  # g -> probability vector in catalog class order
    class_order: dict  # g -> list of class ids
    min_points: int = 10
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "min_points": self.min_points,
            "class_order": {g: list(c) for g, c in self.class_order.items()},
            "priors": {g: p.tolist() for g, p in self.priors.items()},
            "entries": {_key(*k): m.to_list() for k, m in self.entries.items()},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmFeatureBank":
        entries = {}
        for key, comps in d["entries"].items():
            g, c, gw = key.split("|")
            entries[(g, c, gw)] = Gmm2D.from_list(comps)
        return cls(entries,
                   {g: np.asarray(p, dtype=float) for g, p in d["priors"].items()},
                   {g: list(c) for g, c in d["class_order"].items()},
                   int(d["min_points"]), d.get("diagnostics", {}))


def collect_pairs(scenes: Sequence[Scene]) -> dict:
    """(g, c, gw) -> array of (candidate r, a_other / a_candidate) points."""
    buckets: dict = {}
    for scene in scenes:
        n = len(scene.boxes)
        if n < 2:
            continue
        w = np.array([b.width_px for b in scene.boxes])
        h = np.array([b.height_px for b in scene.boxes])
        r = w / h
        area = w * h
        for i, cand in enumerate(scene.boxes):
            if cand.class_id is None:
                raise ValueError(f"scene {scene.scene_id} has unlabeled box {cand.box_id}")
            for j, other in enumerate(scene.boxes):
                if j == i:
                    continue
                buckets.setdefault((cand.group_id, cand.class_id, other.group_id), []).append(
                    (r[i], area[j] / area[i]))
    return {k: np.array(v) for k, v in buckets.items()}


def build_feature_bank(train_scenes: Sequence[Scene], catalog: Catalog,
                       opts: BankOptions = BankOptions()) -> GmmFeatureBank:
    pairs = collect_pairs(train_scenes)
    counts = {g.group_id: np.zeros(g.n_variants) for g in catalog.groups}
    for scene in train_scenes:
        for b in scene.boxes:
            counts[b.group_id][catalog.group(b.group_id).class_ids.index(b.class_id)] += 1

    class_order = {g.group_id: g.class_ids for g in catalog.groups}
    priors = {g: (cnt + 1.0) / (cnt.sum() + len(cnt)) for g, cnt in counts.items()}
    diagnostics = {"skipped_groups": [], "entries": {}, "below_min_points": []}
    for g, cnt in counts.items():
        if cnt.sum() == 0:
            log.warning("group %s has no training candidates", g)
            diagnostics["skipped_groups"].append(g)

    entries = {}
    for key in sorted(pairs):
        g, c, gw = key
        pts = pairs[key]
        if len(pts) < opts.min_points:
            diagnostics["below_min_points"].append(_key(*key))
            continue
        model, diag = fit_gmm_em(pts, catalog.n_variants(gw), opts.em)
        entries[key] = model
        diagnostics["entries"][_key(*key)] = {
            "n_points": int(len(pts)), "k_effective": diag.k_effective,
            "iterations": diag.iterations, "log_likelihood": diag.log_likelihood,
        }
    return GmmFeatureBank(entries, priors, class_order, opts.min_points, diagnostics)


def class_posteriors_many(bank: GmmFeatureBank, g: str, gw: str, X) -> np.ndarray:
    """Row-wise posteriors over ``g``'s classes for context points ``X`` of shape (n, 2)."""
    if g not in bank.class_order:
        raise KeyError(f"unknown group {g!r}")
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    prior = bank.priors[g]
    classes = bank.class_order[g]
    n = len(X)
    if len(classes) == 1:
        return np.ones((n, 1))
    loglik = np.full((n, len(classes)), _LOG_MISSING)
    fitted = np.zeros(len(classes), dtype=bool)
    for ci, c in enumerate(classes):
        m = bank.entries.get((g, c, gw))
        if m is not None:
            loglik[:, ci] = gmm_logpdf_many(X, m)
            fitted[ci] = True
    out = np.tile(prior, (n, 1))
    if not fitted.any():
        return out
    usable = loglik[:, fitted].max(axis=1) >= _LOG_UNDERFLOW
    if usable.any():
        lp = np.log(prior)[None, :] + loglik[usable]
        lp -= lp.max(axis=1, keepdims=True)
        p = np.exp(lp)
        out[usable] = p / p.sum(axis=1, keepdims=True)
    return out


def class_posteriors(bank: GmmFeatureBank, g: str, gw: str, x) -> np.ndarray:
    """p(class | (r, area ratio)) over group ``g``'s classes, given context group ``gw``."""
    return class_posteriors_many(bank, g, gw, np.asarray(x, dtype=float).reshape(1, 2))[0]

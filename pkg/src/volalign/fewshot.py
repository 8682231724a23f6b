"""Episodes, prototypes, prototype combination and episode evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    CountMismatch,
    EmptyClass,
    EmptyValidation,
    InsufficientCandidates,
    KindMismatch,
)
from .fusion import FusionConfig, ModelParams, fuse_t, map_text_t
from .geometry import normalize_rows

KINDS = ("plain", "text", "vision", "combined")


@dataclass
class Episode:
    """One N-way K-shot task.

    support: (N, K, T, D) token sets, class i in row i
    query: (N*M, D) with integer ``query_labels``
    text: (N, text_dim) raw class descriptors
    synthetic: (N, K_syn, D) synthetic visual embeddings
    classes: (N,) class ids in the generator's pool
    """

    support: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    text: np.ndarray
    synthetic: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        n, k = self.support.shape[:2]
        if self.support.ndim != 4:
            raise CountMismatch("support must be shaped (N, K, T, D)")
        if self.text.shape[0] != n or self.synthetic.shape[0] != n:
            raise CountMismatch("text/synthetic rows must match the number of classes")
        labels = np.asarray(self.query_labels)
        if labels.shape[0] != self.query.shape[0]:
            raise CountMismatch("one label per query is required")
        if labels.size and (labels.min() < 0 or labels.max() >= n):
            raise CountMismatch(f"query labels must lie in 0..{n - 1}")

    @property
    def n_way(self):
        return self.support.shape[0]

    @property
    def k_shot(self):
        return self.support.shape[1]

    @property
    def query_per_class(self):
        return self.query.shape[0] // self.n_way

    @property
    def dim(self):
        return self.support.shape[-1]


@dataclass
class PrototypeSet:
    per_class: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")

    def __len__(self):
        return self.per_class.shape[0]


def support_features(episode: Episode) -> np.ndarray:
    """Global feature per support sample: normalized mean of its tokens, (N, K, D)."""
    return normalize_rows(episode.support.mean(axis=2))


def prototypes(features) -> PrototypeSet:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] == 0:
        raise EmptyClass("every class needs at least one support feature")
    return PrototypeSet(normalize_rows(f.mean(axis=1)), "plain")


def enriched_support(episode: Episode) -> np.ndarray:
    """Real support features followed by synthetic ones, (N, K + K_syn, D)."""
    real = support_features(episode)
    syn = np.asarray(episode.synthetic, dtype=np.float64)
    if syn.shape[0] != real.shape[0] or syn.shape[-1] != real.shape[-1]:
        raise CountMismatch("synthetic set does not match the support set layout")
    if syn.shape[1] == 0:
        raise CountMismatch("no synthetic samples to enrich the support set with")
    return np.concatenate([real, syn], axis=1)


def text_prototypes_t(episode: Episode, prm: dict, mode: str):
    """Text-enhanced prototypes c_t (N, D), projected text Z_t (N, D), fused support (N, K, D)."""
    n, k, t, d = episode.support.shape
    mapped = map_text_t(episode.text, prm["text_projection"])
    zt = ad.normalize_rows(mapped)
    per_sample = ad.reshape(ad.broadcast_to(ad.reshape(mapped, (n, 1, d)), (n, k, d)), (n * k, d))
    zs = fuse_t(per_sample, episode.support.reshape(n * k, t, d), prm, mode)
    zs = ad.reshape(zs, (n, k, d))
    ct = ad.normalize_rows(ad.mean(zs, axis=1))
    return ct, zt, zs


def prototype_text(episode: Episode, params: ModelParams, fusion: FusionConfig = FusionConfig()) -> PrototypeSet:
    ct, _, _ = text_prototypes_t(episode, params.arrays(), fusion.mode)
    return PrototypeSet(ct.value, "text")


def prototype_vis(episode: Episode) -> PrototypeSet:
    p = prototypes(enriched_support(episode))
    return PrototypeSet(p.per_class, "vision")


def combine_prototypes(c_t: PrototypeSet, c_v: PrototypeSet, u: float) -> PrototypeSet:
    if c_t.kind != "text" or c_v.kind != "vision":
        raise KindMismatch(f"expected (text, vision) prototypes, got ({c_t.kind}, {c_v.kind})")
    if len(c_t) != len(c_v):
        raise KindMismatch("prototype sets cover different numbers of classes")
    if not 0.0 <= u <= 1.0:
        raise ValueError("fusion factor u must lie in [0, 1]")
    return PrototypeSet(normalize_rows(u * c_t.per_class + (1.0 - u) * c_v.per_class), "combined")


def predict(queries, protos) -> np.ndarray:
    """Argmax cosine class per query; ties go to the lower class index."""
    q = normalize_rows(np.atleast_2d(queries))
    return np.argmax(q @ normalize_rows(protos).T, axis=1)


def prototype_accuracy(queries, labels, protos) -> float:
    return float(np.mean(predict(queries, protos) == np.asarray(labels)))


def evaluate_episode(episode: Episode, params: ModelParams, u: float = 0.5,
                     temperature: float = 0.2, fusion: FusionConfig = FusionConfig()) -> float:
    """Fraction of queries classified correctly against the combined prototypes.

    Classification takes the softmax argmax, which does not depend on the
    temperature; the argument is kept for interface symmetry with training.
    """
    combined = combine_prototypes(prototype_text(episode, params, fusion), prototype_vis(episode), u)
    return prototype_accuracy(episode.query, episode.query_labels, combined.per_class)


def u_grid(step: float = 0.1) -> np.ndarray:
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide [0, 1] evenly")
    return np.round(np.linspace(0.0, 1.0, n + 1), 12)


def correct_counts_by_u(episode: Episode, us, c_t: np.ndarray, c_v: np.ndarray) -> np.ndarray:
    """Number of correct queries for each u, reusing precomputed prototypes."""
    out = np.empty(len(us), dtype=np.int64)
    for i, u in enumerate(us):
        protos = normalize_rows(u * c_t + (1.0 - u) * c_v)
        out[i] = int(np.sum(predict(episode.query, protos) == episode.query_labels))
    return out


def accuracy_curve(episodes, params: ModelParams, us, fusion: FusionConfig = FusionConfig()) -> np.ndarray:
    """Mean accuracy over episodes at every u in ``us``; summed in episode order."""
    episodes = list(episodes)
    if not episodes:
        raise EmptyValidation("no episodes to evaluate")
    correct = np.zeros(len(us), dtype=np.int64)
    total = 0
    for ep in episodes:
        c_t = prototype_text(ep, params, fusion).per_class
        c_v = prototype_vis(ep).per_class
        correct += correct_counts_by_u(ep, us, c_t, c_v)
        total += ep.query.shape[0]
    return correct / total


def grid_search_u(episodes, params: ModelParams, temperature: float = 0.2, grid_step: float = 0.1,
                  fusion: FusionConfig = FusionConfig(), grid=None) -> float:
    """u on the grid with the best mean validation accuracy; ties go to the smaller u.

    ``grid`` overrides the evenly spaced grid with explicit values in [0, 1].
    """
    if grid is None:
        us = u_grid(grid_step)
    else:
        us = np.sort(np.asarray(grid, dtype=np.float64).reshape(-1))
        if us.size == 0 or us[0] < 0.0 or us[-1] > 1.0:
            raise ValueError("grid values must lie in [0, 1]")
    curve = accuracy_curve(episodes, params, us, fusion)
    return float(us[int(np.argmax(curve))])


def select_top_k(candidates, text, k: int) -> np.ndarray:
    """The k candidates most cosine-similar to ``text``; ties keep input order."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if k > cands.shape[0]:
        raise InsufficientCandidates(f"need {k} candidates, have {cands.shape[0]}")
    t = np.asarray(text, dtype=np.float64).reshape(-1)
    scores = normalize_rows(cands) @ (t / np.linalg.norm(t))
    order = np.argsort(-scores, kind="stable")
    return cands[order[:k]]


def mean_ci95(values) -> tuple[float, float]:
    """Mean and 95% normal-approximation confidence half-width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(v.size))

"""Kernelized-volume contrastive losses, baselines and the cosine classifier.

The public functions take plain arrays and return floats. The ``*_t``
variants build the same quantities on :class:`~volalign.autodiff.Tensor`
inputs so the trainer can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, EmptyPrototypes, IndexOutOfRange
from .geometry import KernelSpec, normalize_rows

UNIT_TOL = 1e-9
ANCHORS = ("text", "vision")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    kernel: KernelSpec = field(default_factory=KernelSpec.rbf)
    anchor: str = "text"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}")


@dataclass(frozen=True)
class EmbeddingTriplet:
    text: np.ndarray
    support: np.ndarray
    vision: np.ndarray


@dataclass
class AlignmentBatch:
    """B aligned (text, support, vision) rows; row i of each array is one class."""

    text: np.ndarray
    support: np.ndarray
    vision: np.ndarray

    def __post_init__(self):
        self.text = np.atleast_2d(np.asarray(self.text, dtype=np.float64))
        self.support = np.atleast_2d(np.asarray(self.support, dtype=np.float64))
        self.vision = np.atleast_2d(np.asarray(self.vision, dtype=np.float64))
        shapes = {self.text.shape, self.support.shape, self.vision.shape}
        if len(shapes) != 1:
            raise DimensionMismatch(f"triplet members disagree in shape: {sorted(shapes)}")
        if self.text.shape[0] < 1:
            raise ValueError("an alignment batch needs at least one triplet")
        for name in ("text", "support", "vision"):
            norms = np.linalg.norm(getattr(self, name), axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise ValueError(f"{name} embeddings must be unit-normalized")

    @classmethod
    def from_triplets(cls, triplets):
        triplets = list(triplets)
        return cls(
            np.stack([t.text for t in triplets]),
            np.stack([t.support for t in triplets]),
            np.stack([t.vision for t in triplets]),
        )

    @property
    def size(self):
        return self.text.shape[0]

    @property
    def class_count(self):
        return self.size

    def triplets(self):
        return [EmbeddingTriplet(t, s, v) for t, s, v in zip(self.text, self.support, self.vision)]


# ---------------------------------------------------------------- tensor core


def kernel_gram_t(spec: KernelSpec, x):
    """Kernel Gram over the second-to-last axis of a (..., k, D) tensor."""
    x = ad.as_tensor(x)
    if spec.kind == "rbf":
        diff = ad.sub(ad.reshape(x, x.shape[:-1] + (1, x.shape[-1])),
                      ad.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:]))
        sq = ad.tsum(diff * diff, axis=-1)
        return ad.exp(sq * (-1.0 / (2.0 * spec.sigma**2)))
    g = ad.matmul(x, ad.swapaxes(x, -1, -2))
    if spec.kind == "linear":
        return g
    return ad.power(g + spec.offset, spec.degree)


def _pair_stack(mods, anchor_idx, anchor_varies):
    """(B, B, k, D) tensor whose [i, j] entry holds one candidate tuple.

    When ``anchor_varies`` the anchor slot takes row j and the rest row i;
    otherwise the anchor keeps row i and the rest take row j.
    """
    b, d = mods[0].shape
    parts = []
    for m, t in enumerate(mods):
        uses_j = (m == anchor_idx) == anchor_varies
        src = ad.reshape(t, (1, b, d)) if uses_j else ad.reshape(t, (b, 1, d))
        parts.append(ad.broadcast_to(src, (b, b, d)))
    return ad.stack(parts, axis=2)


def volume_matrix_t(mods, anchor_idx, spec, anchor_varies, on_degenerate="raise"):
    """Kernel volumes of every (positive, negative) tuple, shape (B, B).

    Returns ``(volumes, degenerate_mask)``. With ``on_degenerate="skip"``
    singular Grams keep their value but pass no gradient.
    """
    k = kernel_gram_t(spec, _pair_stack(mods, anchor_idx, anchor_varies))
    if on_degenerate == "raise":
        return ad.sqrt_det(k), np.zeros(k.shape[:2], dtype=bool)
    return _sqrt_det_skip(k)


def _sqrt_det_skip(k):
    from .geometry import _det_psd_batch

    shape = k.shape
    flat = k.value.reshape(-1, shape[-2], shape[-1])
    vol = np.sqrt(_det_psd_batch(flat)).reshape(shape[:-2])
    lo = np.linalg.eigvalsh(flat)[:, 0].reshape(shape[:-2])
    bad = lo <= ad.DEGENERACY_EIG

    def bw(g):
        safe = np.where(bad[..., None, None], np.eye(shape[-1]), k.value)
        inv = np.swapaxes(np.linalg.inv(safe), -1, -2)
        scale = np.where(bad, 0.0, g * vol)
        ad._accumulate(k, scale[..., None, None] * 0.5 * inv)

    return ad._make(vol, (k,), bw), bad


def contrastive_from_volumes_t(vol, temperature):
    """-(1/B) sum_i log softmax_j(-vol[i, j] / tau) evaluated at j = i."""
    vol = ad.as_tensor(vol)
    b = vol.shape[0]
    logits = vol * (-1.0 / temperature)
    diag = ad.getitem(logits, (np.arange(b), np.arange(b)))
    return ad.mean(ad.logsumexp(logits, axis=1) - diag)


def _anchor_index(anchor, n_mods):
    # tuples are ordered (text, support, vision); two-member tuples put the
    # anchor first
    if n_mods == 3:
        return 0 if anchor == "text" else 2
    return 0


def d2a_t(mods, cfg: LossConfig, on_degenerate="raise"):
    a = _anchor_index(cfg.anchor, len(mods))
    vol, bad = volume_matrix_t(mods, a, cfg.kernel, True, on_degenerate)
    return contrastive_from_volumes_t(vol, cfg.temperature), bad


def a2d_t(mods, cfg: LossConfig, on_degenerate="raise"):
    a = _anchor_index(cfg.anchor, len(mods))
    vol, bad = volume_matrix_t(mods, a, cfg.kernel, False, on_degenerate)
    return contrastive_from_volumes_t(vol, cfg.temperature), bad


def align_t(mods, cfg: LossConfig, on_degenerate="raise"):
    """Mean of D2A and A2D plus the number of batch rows touching a singular Gram."""
    l1, bad1 = d2a_t(mods, cfg, on_degenerate)
    l2, bad2 = a2d_t(mods, cfg, on_degenerate)
    n_bad = int(np.count_nonzero(bad1.any(axis=1) | bad2.any(axis=1)))
    return (l1 + l2) * 0.5, n_bad


def infonce_t(mods, cfg: LossConfig):
    """Symmetric pairwise InfoNCE between the anchor and each other modality."""
    a = _anchor_index(cfg.anchor, len(mods))
    anchor = ad.normalize_rows(mods[a])
    b = anchor.shape[0]
    idx = (np.arange(b), np.arange(b))
    terms = []
    for m, other in enumerate(mods):
        if m == a:
            continue
        logits = ad.matmul(anchor, ad.swapaxes(ad.normalize_rows(other), 0, 1)) * (1.0 / cfg.temperature)
        diag = ad.getitem(logits, idx)
        rows = ad.mean(ad.logsumexp(logits, axis=1) - diag)
        cols = ad.mean(ad.logsumexp(logits, axis=0) - diag)
        terms.append((rows + cols) * 0.5)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def cosine_logits_t(queries, prototypes, temperature):
    q = ad.normalize_rows(queries)
    c = ad.normalize_rows(prototypes)
    return ad.matmul(q, ad.swapaxes(c, 0, 1)) * (1.0 / temperature)


def cross_entropy_sum_t(logits, labels):
    n = logits.shape[0]
    picked = ad.getitem(logits, (np.arange(n), np.asarray(labels)))
    return ad.tsum(ad.logsumexp(logits, axis=1) - picked)


# ----------------------------------------------------------------- float API


def _mods(batch: AlignmentBatch):
    return [ad.Tensor(batch.text), ad.Tensor(batch.support), ad.Tensor(batch.vision)]


def loss_d2a(batch: AlignmentBatch, cfg: LossConfig = LossConfig()) -> float:
    return d2a_t(_mods(batch), cfg)[0].item()


def loss_a2d(batch: AlignmentBatch, cfg: LossConfig = LossConfig()) -> float:
    return a2d_t(_mods(batch), cfg)[0].item()


def loss_align(batch: AlignmentBatch, cfg: LossConfig = LossConfig()) -> float:
    return 0.5 * (loss_d2a(batch, cfg) + loss_a2d(batch, cfg))


def loss_infonce(batch: AlignmentBatch, cfg: LossConfig = LossConfig()) -> float:
    return infonce_t(_mods(batch), cfg).item()


def loss_linear_volume(batch: AlignmentBatch, cfg: LossConfig = LossConfig()) -> float:
    return loss_align(batch, LossConfig(cfg.temperature, KernelSpec.linear(), cfg.anchor))


def volume_matrix(batch: AlignmentBatch, cfg: LossConfig, direction: str) -> np.ndarray:
    """Volumes used by ``direction`` ("d2a" or "a2d"); entry [i, i] is the positive."""
    a = _anchor_index(cfg.anchor, 3)
    vol, _ = volume_matrix_t(_mods(batch), a, cfg.kernel, direction == "d2a")
    return vol.value


def contrastive_from_volumes(vol, temperature) -> float:
    return contrastive_from_volumes_t(np.asarray(vol, dtype=np.float64), temperature).item()


def classify(query, prototypes, temperature: float = 0.2) -> np.ndarray:
    """Softmax over cosine similarity / temperature."""
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim == 1:
        protos = protos[None, :]
    if protos.shape[0] == 0:
        raise EmptyPrototypes("no prototypes to classify against")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if protos.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query dim {q.shape[0]} != prototype dim {protos.shape[1]}")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    scores = normalize_rows(protos) @ (q / np.linalg.norm(q)) / temperature
    z = np.exp(scores - scores.max())
    return z / z.sum()


def cross_entropy(probs, label: int) -> float:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 0 <= label < p.shape[0]:
        raise IndexOutOfRange(f"label {label} outside 0..{p.shape[0] - 1}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    if p[label] == 1.0:
        return 0.0
    return float(-np.log(p[label]))

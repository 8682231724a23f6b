"""Deterministic synthetic multimodal episodes and embedding file I/O.

Class centers are random unit vectors. Each modality is a normalized,
perturbed copy of its class center:

* support tokens and queries add isotropic Gaussian noise whose expected
  norm is ``support_noise`` / ``query_noise`` (per-coordinate std
  ``noise / sqrt(dim)``);
* the text descriptor of a class adds a fixed per-class direction scaled to
  ``text_shift``; it does not change from episode to episode;
* every synthetic sample adds a fresh random direction scaled to
  ``synthetic_shift``. Each class gets ``synthetic_count`` of them (default
  K); with ``synthetic_candidates`` set, that many are drawn and the ones
  closest to the class descriptor are kept.

When ``text_dim`` differs from ``dim`` (or ``rotate_text`` is set) text
descriptors are additionally pushed through a fixed random linear map, so
the text projection has to learn its way back into the visual space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SeparationUnsatisfiable
from .fewshot import Episode, select_top_k
from .geometry import normalize_rows
from .rng import Stream

MODALITIES = ("support", "query", "text", "synthetic")

# child-stream keys
_CENTERS, _TEXT_OFFSETS, _TEXT_MAP = 1, 2, 3


@dataclass(frozen=True)
class GeneratorConfig:
    class_pool: int = 100
    dim: int = 64
    token_count: int = 9
    support_noise: float = 1.0
    query_noise: float = 1.0
    text_shift: float = 0.5
    synthetic_shift: float = 0.8
    seed: int = 0
    separation: float = 0.5
    max_retries: int = 1000
    text_dim: int | None = None
    rotate_text: bool = False
    synthetic_candidates: int | None = None
    synthetic_count: int | None = None

    def __post_init__(self):
        for name in ("class_pool", "dim", "token_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.synthetic_count is not None and self.synthetic_count < 1:
            raise ValueError("synthetic_count must be positive")
        for name in ("support_noise", "query_noise", "text_shift", "synthetic_shift"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")

    @property
    def resolved_text_dim(self):
        return self.dim if self.text_dim is None else self.text_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EmbeddingRecord:
    class_id: int
    modality: str
    vector: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, EmbeddingRecord) and self.class_id == other.class_id
                and self.modality == other.modality and np.array_equal(self.vector, other.vector))


def gen_class_centers(cfg: GeneratorConfig) -> np.ndarray:
    """``class_pool`` unit vectors with pairwise cosine below ``cfg.separation``."""
    stream = Stream(cfg.seed).child(_CENTERS)
    centers = np.empty((cfg.class_pool, cfg.dim))
    for c in range(cfg.class_pool):
        for _ in range(cfg.max_retries):
            v = stream.unit_vectors(1, cfg.dim)[0]
            if c == 0 or np.max(centers[:c] @ v) < cfg.separation:
                centers[c] = v
                break
        else:
            raise SeparationUnsatisfiable(
                f"could not place center {c} below cosine {cfg.separation} in {cfg.max_retries} draws")
    return centers


def _text_map(cfg: GeneratorConfig):
    tdim = cfg.resolved_text_dim
    if tdim == cfg.dim and not cfg.rotate_text:
        return None
    g = Stream(cfg.seed).child(_TEXT_MAP).normal((max(tdim, cfg.dim), max(tdim, cfg.dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q[:tdim, :cfg.dim]


def _text_in_visual_space(cfg: GeneratorConfig, centers: np.ndarray, class_ids) -> np.ndarray:
    root = Stream(cfg.seed)
    offsets = np.stack([root.child(_TEXT_OFFSETS, int(c)).unit_vectors(1, cfg.dim)[0] for c in class_ids])
    return normalize_rows(centers[np.asarray(class_ids)] + cfg.text_shift * offsets)


def text_descriptors(cfg: GeneratorConfig, centers: np.ndarray, class_ids) -> np.ndarray:
    """Raw text embeddings for the given classes, (len(class_ids), text_dim)."""
    text = _text_in_visual_space(cfg, centers, class_ids)
    m = _text_map(cfg)
    return text if m is None else normalize_rows(text @ m.T)


def _noisy(stream, base, noise, dim):
    return normalize_rows(base + stream.normal(base.shape) * (noise / np.sqrt(dim)))


def gen_episode(cfg: GeneratorConfig, centers: np.ndarray, n_way: int, k_shot: int,
                query_per_class: int, stream: Stream, pool=None) -> Episode:
    """Sample one episode from ``pool`` (default: every class) using ``stream``."""
    pool = np.arange(len(centers)) if pool is None else np.asarray(pool)
    if n_way > len(pool):
        raise ValueError(f"{n_way}-way episode needs at least {n_way} classes, pool has {len(pool)}")
    classes = pool[stream.choice(len(pool), n_way)]
    c = centers[classes]
    d, t = cfg.dim, cfg.token_count
    support = _noisy(stream, np.broadcast_to(c[:, None, None, :], (n_way, k_shot, t, d)), cfg.support_noise, d)
    query = _noisy(stream, np.broadcast_to(c[:, None, :], (n_way, query_per_class, d)), cfg.query_noise, d)
    text = text_descriptors(cfg, centers, classes)
    k_syn = k_shot if cfg.synthetic_count is None else cfg.synthetic_count
    n_cand = k_syn if cfg.synthetic_candidates is None else max(cfg.synthetic_candidates, k_syn)
    offsets = stream.unit_vectors(n_way * n_cand, d).reshape(n_way, n_cand, d)
    synthetic = normalize_rows(c[:, None, :] + cfg.synthetic_shift * offsets)
    if n_cand > k_syn:
        # rank candidates against the class descriptor in visual space
        text_vis = _text_in_visual_space(cfg, centers, classes)
        synthetic = np.stack([select_top_k(synthetic[i], text_vis[i], k_syn) for i in range(n_way)])
    labels = np.repeat(np.arange(n_way), query_per_class)
    return Episode(support, query.reshape(n_way * query_per_class, d), labels, text, synthetic, classes)


def split_pool(cfg: GeneratorConfig, fractions=(0.6, 0.2, 0.2)):
    """Disjoint train / validation / test class-id ranges."""
    n = cfg.class_pool
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return np.arange(0, a), np.arange(a, b), np.arange(b, n)


def episode_records(episode: Episode) -> list[EmbeddingRecord]:
    """Flatten an episode into records; support samples are token-averaged."""
    recs = []
    feats = normalize_rows(episode.support.mean(axis=2))
    for i, cid in enumerate(episode.classes):
        cid = int(cid)
        recs += [EmbeddingRecord(cid, "support", v) for v in feats[i]]
        recs.append(EmbeddingRecord(cid, "text", episode.text[i]))
        recs += [EmbeddingRecord(cid, "synthetic", v) for v in episode.synthetic[i]]
    for v, lab in zip(episode.query, episode.query_labels):
        recs.append(EmbeddingRecord(int(episode.classes[lab]), "query", v))
    return recs


def save_embeddings(path, records) -> None:
    """JSON-lines file: a header ``{"dim", "count"}`` then one record per line."""
    records = list(records)
    dims = {len(r.vector) for r in records}
    if len(dims) > 1:
        raise FormatError(f"records have differing dims {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": dim, "count": len(records)}) + "\n")
        for r in records:
            if r.modality not in MODALITIES:
                raise FormatError(f"unknown modality {r.modality!r}")
            fh.write(json.dumps({"class_id": int(r.class_id), "modality": r.modality,
                                 "vector": [float(x) for x in r.vector]}) + "\n")


def load_embeddings(path) -> list[EmbeddingRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("empty embedding file")
    try:
        header = json.loads(lines[0])
        dim, count = int(header["dim"]), int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad header: {exc}") from exc
    body = lines[1:]
    if len(body) != count:
        raise FormatError(f"header promises {count} records, file has {len(body)}")
    out = []
    for n, line in enumerate(body, start=2):
        try:
            obj = json.loads(line)
            rec = EmbeddingRecord(int(obj["class_id"]), obj["modality"],
                                  np.array(obj["vector"], dtype=np.float64))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"line {n}: {exc}") from exc
        if rec.modality not in MODALITIES:
            raise FormatError(f"line {n}: unknown modality {rec.modality!r}")
        if rec.vector.shape != (dim,):
            raise FormatError(f"line {n}: vector length {rec.vector.size} != header dim {dim}")
        out.append(rec)
    return out

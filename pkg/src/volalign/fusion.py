"""Text-conditioned channel gate and self-attention over support tokens.

Shapes: ``D`` embedding width, ``T`` support tokens per sample, ``H`` heads
of width ``d = D / H``, ``h`` gate hidden width. Batched tensor functions
take ``P`` support samples at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch

FUSION_MODES = ("gate", "gate_attention")
PARAM_NAMES = ("W1", "W2", "Wq", "Wk", "Wv", "Wo", "text_projection")


@dataclass
class GateParams:
    W1: np.ndarray  # (h, 2D)
    W2: np.ndarray  # (D, h)

    def __post_init__(self):
        h, two_d = self.W1.shape
        if self.W2.shape != (two_d // 2, h) or two_d % 2:
            raise ShapeMismatch(f"gate shapes {self.W1.shape} / {self.W2.shape} are inconsistent")

    @property
    def dim(self):
        return self.W2.shape[0]


@dataclass
class AttentionParams:
    Wq: np.ndarray  # (H, D, d)
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray  # (D, D), applied to the concatenated heads

    def __post_init__(self):
        shapes = {self.Wq.shape, self.Wk.shape, self.Wv.shape}
        if len(shapes) != 1 or self.Wq.ndim != 3:
            raise ShapeMismatch("query/key/value projections must share an (H, D, d) shape")
        heads, dim, d = self.Wq.shape
        if heads * d != dim or self.Wo.shape != (dim, dim):
            raise ShapeMismatch(f"heads*d must equal D and Wo must be (D, D); got H={heads}, d={d}, D={dim}")

    @property
    def heads(self):
        return self.Wq.shape[0]

    @property
    def head_dim(self):
        return self.Wq.shape[2]


@dataclass
class FusionConfig:
    mode: str = "gate_attention"

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}")


@dataclass
class ModelParams:
    gate: GateParams
    attention: AttentionParams
    text_projection: np.ndarray  # (D, text_dim)

    def __post_init__(self):
        dim = self.gate.dim
        if self.attention.Wo.shape[0] != dim or self.text_projection.shape[0] != dim:
            raise ShapeMismatch("gate, attention and text projection disagree on D")

    @property
    def dim(self):
        return self.gate.dim

    def arrays(self) -> dict:
        return {
            "W1": self.gate.W1, "W2": self.gate.W2,
            "Wq": self.attention.Wq, "Wk": self.attention.Wk,
            "Wv": self.attention.Wv, "Wo": self.attention.Wo,
            "text_projection": self.text_projection,
        }

    @classmethod
    def from_arrays(cls, a: dict) -> "ModelParams":
        a = {k: np.array(v, dtype=np.float64) for k, v in a.items()}
        return cls(GateParams(a["W1"], a["W2"]),
                   AttentionParams(a["Wq"], a["Wk"], a["Wv"], a["Wo"]),
                   a["text_projection"])

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays()[k].reshape(-1) for k in PARAM_NAMES])

    def unflat(self, x) -> "ModelParams":
        out, i = {}, 0
        for k in PARAM_NAMES:
            ref = self.arrays()[k]
            out[k] = np.asarray(x[i:i + ref.size]).reshape(ref.shape)
            i += ref.size
        return ModelParams.from_arrays(out)


def init_params(dim, text_dim=None, hidden=32, heads=4, stream=None) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from a portable stream."""
    from .rng import Stream

    if dim % heads:
        raise ShapeMismatch(f"dim {dim} is not divisible by {heads} heads")
    stream = stream if stream is not None else Stream(0)
    text_dim = dim if text_dim is None else text_dim
    d = dim // heads

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return (2.0 * stream.uniform(shape) - 1.0) * bound

    return ModelParams(
        GateParams(u((hidden, 2 * dim), 2 * dim), u((dim, hidden), hidden)),
        AttentionParams(u((heads, dim, d), dim), u((heads, dim, d), dim),
                        u((heads, dim, d), dim), u((dim, dim), dim)),
        u((dim, text_dim), text_dim),
    )


# ---------------------------------------------------------------- tensor core


def map_text_t(text_raw, projection):
    """Linear map of raw text embeddings (N, text_dim) into the visual space, unnormalized.

    Fusion consumes this token directly, so its norm is learnable and decides
    how strongly the text competes with support tokens for attention.
    """
    return ad.matmul(text_raw, ad.swapaxes(ad.as_tensor(projection), 0, 1))


def project_text_t(text_raw, projection):
    """Mapped text, unit-normalized: the Z_t that enters alignment losses."""
    return ad.normalize_rows(map_text_t(text_raw, projection))


def channel_gate_t(text, tokens, W1, W2):
    """text (P, D), tokens (P, T, D) -> (beta (P, D), gated tokens (P, T, D))."""
    tokens = ad.as_tensor(tokens)
    inp = ad.concat([ad.as_tensor(text), ad.mean(tokens, axis=1)], axis=1)
    hidden = ad.sigmoid(ad.matmul(inp, ad.swapaxes(ad.as_tensor(W1), 0, 1)))
    beta = ad.sigmoid(ad.matmul(hidden, ad.swapaxes(ad.as_tensor(W2), 0, 1)))
    p, d = beta.shape
    return beta, tokens * ad.reshape(beta, (p, 1, d))


def self_attend_t(x, Wq, Wk, Wv, Wo, return_attention=False):
    """Multi-head self-attention over tokens x (P, L, D)."""
    x = ad.as_tensor(x)
    p, length, dim = x.shape
    heads, _, d = ad.as_tensor(Wq).shape
    xs = ad.reshape(x, (p, 1, length, dim))
    q = ad.matmul(xs, Wq)  # (P, H, L, d)
    k = ad.matmul(xs, Wk)
    v = ad.matmul(xs, Wv)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    heads_out = ad.matmul(attn, v)  # (P, H, L, d)
    merged = ad.reshape(ad.swapaxes(heads_out, 1, 2), (p, length, heads * d))
    out = ad.matmul(merged, Wo)
    return (out, attn) if return_attention else out


def fuse_t(text, tokens, prm: dict, mode: str):
    """Enhanced support embeddings Z_s (P, D) from mapped text tokens (P, D).

    The text token is prepended before attention; only the support-derived
    output tokens are pooled.
    """
    _, gated = channel_gate_t(text, tokens, prm["W1"], prm["W2"])
    if mode == "gate_attention":
        p, d = text.shape
        seq = ad.concat([ad.reshape(text, (p, 1, d)), gated], axis=1)
        attended = self_attend_t(seq, prm["Wq"], prm["Wk"], prm["Wv"], prm["Wo"])
        gated = ad.getitem(attended, (slice(None), slice(1, None)))
    return ad.normalize_rows(ad.mean(gated, axis=1))


# ----------------------------------------------------------------- array API


def _tokens(support, dim):
    arr = np.asarray(support, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != dim:
        raise ShapeMismatch(f"expected (T, {dim}) support tokens, got {arr.shape}")
    return arr


def channel_gate(text, support, p: GateParams):
    """Return (beta, modulated tokens) for one support sample."""
    text = np.asarray(text, dtype=np.float64).reshape(-1)
    if text.shape[0] != p.dim:
        raise ShapeMismatch(f"text dim {text.shape[0]} != gate dim {p.dim}")
    tokens = _tokens(support, p.dim)
    beta, gated = channel_gate_t(text[None, :], tokens[None], p.W1, p.W2)
    return beta.value[0], gated.value[0]


def self_attend(tokens, p: AttentionParams, return_attention=False):
    tokens = _tokens(tokens, p.Wo.shape[0])
    out, attn = self_attend_t(tokens[None], p.Wq, p.Wk, p.Wv, p.Wo, return_attention=True)
    if return_attention:
        return out.value[0], attn.value[0]
    return out.value[0]


def fuse(text_raw, support, params: ModelParams, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    text_raw = np.asarray(text_raw, dtype=np.float64).reshape(1, -1)
    if text_raw.shape[1] != params.text_projection.shape[1]:
        raise ShapeMismatch("raw text dim does not match the text projection")
    tokens = _tokens(support, params.dim)
    mapped = map_text_t(text_raw, params.text_projection)
    return fuse_t(mapped, tokens[None], params.arrays(), cfg.mode).value[0]


def project_text(text_raw, params: ModelParams) -> np.ndarray:
    t = np.atleast_2d(np.asarray(text_raw, dtype=np.float64))
    return project_text_t(t, params.text_projection).value


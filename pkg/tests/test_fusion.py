import numpy as np
import pytest

from volalign import autodiff as ad
from volalign.errors import ShapeMismatch
from volalign.fusion import (
    AttentionParams,
    FusionConfig,
    GateParams,
    channel_gate,
    fuse,
    fuse_t,
    init_params,
    map_text_t,
    self_attend,
)
from volalign.geometry import normalize
from volalign.grads import grad_check
from volalign.rng import Stream

from oracles import attention_loop, gate_loop


def test_zero_gate_halves_tokens():
    d, h = 4, 3
    p = GateParams(np.zeros((h, 2 * d)), np.zeros((d, h)))
    tokens = Stream(1).normal((5, d))
    beta, gated = channel_gate(np.ones(d), tokens, p)
    assert np.array_equal(beta, np.full(d, 0.5))
    assert np.array_equal(gated, tokens * 0.5)


def test_gate_range_and_oracle():
    s = Stream(2)
    d, h = 4, 3
    p = GateParams(s.normal((h, 2 * d)), s.normal((d, h)))
    text, tokens = s.normal(d), s.normal((3, d))
    beta, gated = channel_gate(text, tokens, p)
    assert np.all((beta > 0) & (beta < 1))
    ref_beta, ref_gated = gate_loop(text.tolist(), tokens.tolist(), p.W1.tolist(), p.W2.tolist())
    assert np.max(np.abs(beta - ref_beta)) < 1e-10
    assert np.max(np.abs(gated - ref_gated)) < 1e-10


def test_gate_shape_mismatch():
    p = GateParams(np.zeros((3, 8)), np.zeros((4, 3)))
    with pytest.raises(ShapeMismatch):
        channel_gate(np.ones(5), np.ones((2, 4)), p)


def random_attention(s, dim=4, heads=2):
    d = dim // heads
    return AttentionParams(s.normal((heads, dim, d)), s.normal((heads, dim, d)), s.normal((heads, dim, d)),
                           s.normal((dim, dim)))


def test_single_token_attention():
    s = Stream(3)
    p = random_attention(s)
    x = s.normal((1, 4))
    v = np.concatenate([x[0] @ p.Wv[h] for h in range(p.heads)])
    assert np.allclose(self_attend(x, p), (v @ p.Wo)[None], atol=1e-12)


def test_identical_tokens_uniform_attention():
    s = Stream(4)
    p = random_attention(s)
    x = np.tile(s.normal(4), (5, 1))
    _, attn = self_attend(x, p, return_attention=True)
    assert np.allclose(attn, 0.2, atol=1e-12)


def test_attention_matches_loop_oracle():
    s = Stream(5)
    p = random_attention(s, 4, 2)
    x = s.normal((4, 4))
    out, attn = self_attend(x, p, return_attention=True)
    ref, ref_rows = attention_loop(x.tolist(), p.Wq.tolist(), p.Wk.tolist(), p.Wv.tolist(), p.Wo.tolist())
    assert np.max(np.abs(out - ref)) < 1e-8
    assert np.max(np.abs(attn.reshape(-1, 4) - ref_rows)) < 1e-8
    assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_shape_validation():
    with pytest.raises(ShapeMismatch):
        AttentionParams(np.zeros((3, 4, 2)), np.zeros((3, 4, 2)), np.zeros((3, 4, 2)), np.zeros((4, 4)))


def test_gate_only_with_zero_weights_is_plain_mean():
    params = init_params(4, hidden=3, heads=2, stream=Stream(6))
    arrays = params.arrays()
    arrays["W1"] = np.zeros_like(arrays["W1"])
    arrays["W2"] = np.zeros_like(arrays["W2"])
    from volalign.fusion import ModelParams

    params = ModelParams.from_arrays(arrays)
    tokens = Stream(7).normal((5, 4))
    got = fuse(Stream(8).normal(4), tokens, params, FusionConfig("gate"))
    assert np.allclose(got, normalize(tokens.mean(axis=0)), atol=1e-14)


def test_fuse_is_composition_of_gate_and_attention():
    s = Stream(9)
    params = init_params(4, 3, hidden=3, heads=2, stream=s)
    text_raw, tokens = s.normal(3), s.normal((5, 4))
    mapped = params.text_projection @ text_raw
    _, gated = channel_gate(mapped, tokens, params.gate)
    attended = self_attend(np.vstack([mapped, gated]), params.attention)
    expected = normalize(attended[1:].mean(axis=0))
    got = fuse(text_raw, tokens, params, FusionConfig("gate_attention"))
    assert np.max(np.abs(got - expected)) < 1e-10
    assert abs(np.linalg.norm(got) - 1) < 1e-12
    assert np.array_equal(got, fuse(text_raw, tokens, params))


def test_fuse_gradients_for_every_parameter():
    s = Stream(10)
    params = init_params(4, 3, hidden=2, heads=2, stream=s)
    text_raw, tokens = s.normal((2, 3)), s.normal((2, 3, 4))
    target = s.normal((2, 4))

    def f(x, grad=False):
        arrays = params.unflat(x).arrays()
        prm = {k: (ad.leaf(v) if grad else ad.Tensor(v)) for k, v in arrays.items()}
        out = fuse_t(map_text_t(text_raw, prm["text_projection"]), tokens, prm, "gate_attention")
        loss = ad.tsum(out * target)
        if not grad:
            return loss.item()
        loss.backward()
        return np.concatenate([prm[k].grad.reshape(-1) for k in arrays])

    x = params.flat()
    g = f(x.copy(), grad=True)
    assert np.all(g != 0)
    assert grad_check(f, g, x).passed

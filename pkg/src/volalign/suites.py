"""Randomized check suites shared by the command line and the test suite.

``identity_suite`` exercises the closed-form volume identities; its
``inject`` hook flips a sign inside one named identity so callers can
confirm the suite actually detects a broken formula. ``gradient_suite``
compares analytic gradients against central differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .fewshot import Episode
from .fusion import init_params
from .geometry import KernelSpec, det_psd, kernel_gram, kernel_volume, min_eigenvalue, normalize_rows, volume
from .grads import grad_check, grad_kernel_volume
from .losses import LossConfig, a2d_t, align_t, d2a_t, infonce_t
from .rng import Stream

IDENTITIES = ("sine", "det_expansion", "unit_norm", "rank_deficient", "orthogonal_invariance", "rbf_psd")
GRADIENT_TARGETS = ("kernel_volume", "loss_d2a", "loss_a2d", "loss_align", "loss_infonce", "total_loss")


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def _random_dim(stream, lo, hi):
    return lo + int(stream.u64(1)[0] % np.uint64(hi - lo + 1))


def identity_suite(seed: int = 0, count: int = 100, inject: str | None = None) -> list[CheckResult]:
    """Run every volume identity on ``count`` random instances."""
    if inject is not None and inject not in IDENTITIES:
        raise ValueError(f"unknown identity {inject!r}; choose from {IDENTITIES}")
    root = Stream(seed)
    out = []
    for idx, name in enumerate(IDENTITIES):
        flip = -1.0 if inject == name else 1.0
        worst, tol = 0.0, 0.0
        for i in range(count):
            s = root.child(idx, i)
            err, tol = _IDENTITY_CHECKS[name](s, flip)
            worst = max(worst, err)
        out.append(CheckResult(name, count, float(worst), tol, bool(worst <= tol)))
    return out


def _check_sine(s, flip):
    d = _random_dim(s, 2, 8)
    a, b = s.unit_vectors(2, d)
    c = float(a @ b)
    theta = np.arctan2(np.linalg.norm(b - c * a), c)
    return abs(volume([a, b]) - flip * np.sin(theta)), 1e-9


def _check_det_expansion(s, flip):
    d = _random_dim(s, 3, 8)
    t, sv, v = s.unit_vectors(3, d)
    ts, tv, svv = t @ sv, t @ v, sv @ v
    expansion = 1.0 - svv**2 - ts**2 - tv**2 + flip * 2.0 * ts * svv * tv
    return abs(det_psd(np.array([[1, ts, tv], [ts, 1, svv], [tv, svv, 1.0]])) - expansion), 1e-12


def _check_unit_norm(s, flip):
    d = _random_dim(s, 1, 8)
    v = s.normal(d) * (0.5 + s.uniform(1)[0])
    return abs(volume([v]) - flip * np.linalg.norm(v)), 1e-12


def _check_rank_deficient(s, flip):
    d = _random_dim(s, 1, 4)
    k = d + _random_dim(s, 1, 3)
    vs = s.normal((k, d))
    if flip < 0:
        # the injected bug: a sign error in one Gram entry pair
        g = vs @ vs.T
        g[0, 1] = g[1, 0] = -g[0, 1]
        return float(np.sqrt(abs(np.linalg.det(g)))), 1e-9
    return volume(vs), 1e-9


def _check_orthogonal(s, flip):
    d = _random_dim(s, 2, 8)
    k = _random_dim(s, 1, d)
    vs = s.normal((k, d))
    q, r = np.linalg.qr(s.normal((d, d)))
    q = q * np.sign(np.diag(r))
    rotated = vs @ q.T
    rotated[0, 0] *= flip
    return abs(volume(rotated) - volume(vs)), 1e-9


def _check_rbf_psd(s, flip):
    d = _random_dim(s, 1, 8)
    k = _random_dim(s, 2, 8)
    sigma = 0.2 + 3.0 * s.uniform(1)[0]
    gm = kernel_gram(KernelSpec.rbf(sigma), s.normal((k, d)))
    return max(0.0, -min_eigenvalue(flip * gm)), 1e-10


_IDENTITY_CHECKS = {
    "sine": _check_sine,
    "det_expansion": _check_det_expansion,
    "unit_norm": _check_unit_norm,
    "rank_deficient": _check_rank_deficient,
    "orthogonal_invariance": _check_orthogonal,
    "rbf_psd": _check_rbf_psd,
}


# ---------------------------------------------------------------- gradients

_KERNELS = (KernelSpec.rbf(1.0), KernelSpec.polynomial(1.0, 2), KernelSpec.linear(), KernelSpec.rbf(0.7))


def _loss_scalar(fn, b, d, cfg):
    def f(x, grad=False):
        leaf = ad.leaf(x.reshape(3, b, d)) if grad else ad.Tensor(x.reshape(3, b, d))
        mods = [ad.normalize_rows(ad.getitem(leaf, m)) for m in range(3)]
        out = fn(mods, cfg)
        loss = out[0] if isinstance(out, tuple) else out
        if not grad:
            return loss.item()
        loss.backward()
        return leaf.grad.reshape(-1)
    return f


def tiny_episode(stream: Stream, n=3, k=1, t=2, m=2, dim=4, text_dim=3, k_syn=1) -> Episode:
    """A small random episode for finite-difference checks."""
    support = normalize_rows(stream.normal((n, k, t, dim)).reshape(-1, dim)).reshape(n, k, t, dim)
    query = normalize_rows(stream.normal((n * m, dim)))
    text = normalize_rows(stream.normal((n, text_dim)))
    synthetic = normalize_rows(stream.normal((n * k_syn, dim))).reshape(n, k_syn, dim)
    return Episode(support, query, np.repeat(np.arange(n), m), text, synthetic, np.arange(n))


def gradient_suite(seed: int = 0, count: int = 100, tolerance: float = 1e-4, targets=GRADIENT_TARGETS):
    """Max relative analytic-vs-central-difference error per target over ``count`` instances."""
    from .trainer import TrainConfig, total_loss, total_loss_value

    root = Stream(seed)
    out = []
    for idx, name in enumerate(GRADIENT_TARGETS):
        if name not in targets:
            continue
        worst = 0.0
        for i in range(count):
            s = root.child(100 + idx, i)
            if name == "kernel_volume":
                spec = _KERNELS[i % len(_KERNELS)]
                vs = s.unit_vectors(3, 8)
                rep = grad_check(lambda x: kernel_volume(spec, x.reshape(3, 8)),
                                 grad_kernel_volume(spec, vs).as_array().reshape(-1), vs.reshape(-1), tolerance)
            elif name == "total_loss":
                cfg = TrainConfig(hidden=2, heads=2, loss_variant="kernel_volume",
                                  kernel=_KERNELS[i % len(_KERNELS)])
                ep = tiny_episode(s)
                params = init_params(4, 3, hidden=2, heads=2, stream=s.child(1))
                _, g, _ = total_loss(ep, params, cfg)
                rep = grad_check(lambda x: total_loss_value(ep, params.unflat(x), cfg),
                                 g.flat(), params.flat(), tolerance)
            else:
                fn = {"loss_d2a": d2a_t, "loss_a2d": a2d_t, "loss_align": align_t, "loss_infonce": infonce_t}[name]
                b, d = 5, 6
                cfg = LossConfig(kernel=_KERNELS[i % len(_KERNELS)],
                                 anchor="text" if i % 2 == 0 else "vision")
                f = _loss_scalar(fn, b, d, cfg)
                x = s.normal(3 * b * d)
                rep = grad_check(f, f(x.copy(), grad=True), x, tolerance)
            worst = max(worst, rep.max_relative_error)
        out.append(CheckResult(name, count, float(worst), tolerance, bool(worst <= tolerance)))
    return out

"""Gram matrices, parallelotope volumes and kernelized volumes.

Embeddings are plain 1-D float64 numpy arrays; a sequence of ``k`` embeddings
is accepted either as a list of arrays or as a ``(k, dim)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonSymmetric, ZeroVector

MAX_K = 16
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class KernelSpec:
    """Kernel selector.

    ``kind`` is one of ``"linear"``, ``"poly"`` or ``"rbf"``. ``offset`` and
    ``degree`` only matter for the polynomial kernel, ``sigma`` only for RBF.
    """

    kind: str = "rbf"
    sigma: float = 1.0
    offset: float = 1.0
    degree: int = 2

    def __post_init__(self):
        if self.kind not in ("linear", "poly", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not self.sigma > 0:
            raise ValueError("RBF bandwidth must be strictly positive")
        if self.kind == "poly":
            if int(self.degree) != self.degree or self.degree < 1:
                raise ValueError("polynomial degree must be a positive integer")
            if not self.offset >= 0:
                raise ValueError("polynomial offset must be >= 0")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def polynomial(cls, offset=1.0, degree=2):
        return cls("poly", offset=float(offset), degree=int(degree))

    @classmethod
    def rbf(cls, sigma=1.0):
        return cls("rbf", sigma=float(sigma))

    def to_dict(self):
        if self.kind == "linear":
            return {"kind": "linear"}
        if self.kind == "poly":
            return {"kind": "poly", "offset": self.offset, "degree": self.degree}
        return {"kind": "rbf", "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "rbf")
        return cls(kind, **d)


def as_stack(vs) -> np.ndarray:
    """Validate a sequence of embeddings and return it as a (k, dim) array."""
    if isinstance(vs, np.ndarray):
        arr = np.asarray(vs, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
    else:
        rows = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vs]
        if not rows:
            raise DimensionMismatch("empty embedding sequence")
        dims = {r.shape[0] for r in rows}
        if len(dims) != 1:
            raise DimensionMismatch(f"embeddings have differing dims {sorted(dims)}")
        arr = np.stack(rows)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionMismatch(f"expected a non-empty (k, dim) stack, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding values must be finite")
    return arr


def normalize(e) -> np.ndarray:
    v = np.asarray(e, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-15:
        raise ZeroVector("cannot normalize a zero-length vector")
    return v / n


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(n < 1e-15):
        raise ZeroVector("cannot normalize a zero-length vector")
    return m / n


def gram(vs) -> np.ndarray:
    a = as_stack(vs)
    g = a @ a.T
    return 0.5 * (g + g.T)


def _check_k(k, max_k):
    if k > max_k:
        raise ValueError(f"{k} vectors exceeds the configured maximum of {max_k}")


def det_psd(m) -> float | np.ndarray:
    """Determinant of a symmetric PSD matrix (or a stack of them).

    Cholesky first; any matrix whose factorization fails falls back to a
    symmetric eigendecomposition with negative eigenvalues clamped to zero.
    The result is never negative.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionMismatch(f"expected square matrices, got shape {m.shape}")
    if np.max(np.abs(m - np.swapaxes(m, -1, -2)), initial=0.0) > SYMMETRY_TOL:
        raise NonSymmetric("matrix is not symmetric within 1e-9")
    if m.ndim == 2:
        return float(_det_psd_batch(m[None])[0])
    flat = m.reshape(-1, m.shape[-2], m.shape[-1])
    return _det_psd_batch(flat).reshape(m.shape[:-2])


def _det_psd_batch(stack: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(stack)
        d = np.prod(np.diagonal(chol, axis1=-2, axis2=-1), axis=-1)
        return d * d
    except np.linalg.LinAlgError:
        pass
    out = np.empty(stack.shape[0])
    for i, mat in enumerate(stack):
        try:
            c = np.linalg.cholesky(mat)
            out[i] = np.prod(np.diag(c)) ** 2
        except np.linalg.LinAlgError:
            w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
            out[i] = np.prod(np.clip(w, 0.0, None))
    return out


def volume(vs, max_k: int = MAX_K) -> float:
    """sqrt(det G). More vectors than dimensions span no volume, so that case is exactly 0."""
    vs = as_stack(vs)
    _check_k(vs.shape[0], max_k)
    if vs.shape[0] > vs.shape[1]:
        return 0.0
    return float(np.sqrt(det_psd(gram(vs))))


def kernel_eval(spec: KernelSpec, x, z) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if x.shape != z.shape:
        raise DimensionMismatch(f"dims differ: {x.shape[0]} vs {z.shape[0]}")
    if spec.kind == "linear":
        return float(x @ z)
    if spec.kind == "poly":
        return float((x @ z + spec.offset) ** spec.degree)
    d = x - z
    return float(np.exp(-(d @ d) / (2.0 * spec.sigma**2)))


def kernel_gram(spec: KernelSpec, vs) -> np.ndarray:
    a = as_stack(vs)
    if spec.kind == "linear":
        return gram(a)
    if spec.kind == "poly":
        return (gram(a) + spec.offset) ** spec.degree
    diff = a[:, None, :] - a[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    return np.exp(-sq / (2.0 * spec.sigma**2))


def kernel_volume(spec: KernelSpec, vs, max_k: int = MAX_K) -> float:
    if spec.kind == "linear":
        return volume(vs, max_k)
    k = kernel_gram(spec, vs)
    _check_k(k.shape[0], max_k)
    return float(np.sqrt(det_psd(k)))


def min_eigenvalue(m) -> float:
    return float(np.linalg.eigvalsh(np.asarray(m, dtype=np.float64))[0])

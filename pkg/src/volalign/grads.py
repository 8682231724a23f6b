"""Analytic gradients of kernel volumes and a central-difference checker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import KernelSpec, as_stack
from .losses import kernel_gram_t

FD_STEP = 1e-5
# central differences at FD_STEP carry round-off near 2e-11 * |f|; components
# smaller than FD_NOISE * |f| are compared against that floor instead
FD_NOISE = 1e-6


@dataclass
class GradientSet:
    per_input: list

    def __len__(self):
        return len(self.per_input)

    def __getitem__(self, i):
        return self.per_input[i]

    def as_array(self):
        return np.stack(self.per_input)


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_component_errors: np.ndarray
    passed: bool
    tolerance: float


def grad_kernel_volume(spec: KernelSpec, vs) -> GradientSet:
    """Gradient of sqrt(det K) with respect to every input vector.

    Raises DegenerateConfiguration when the kernel Gram is (near) singular.
    """
    x = ad.leaf(as_stack(vs))
    vol = ad.sqrt_det(kernel_gram_t(spec, x))
    vol.backward()
    return GradientSet([row.copy() for row in x.grad])


def finite_diff(f, x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    from .errors import NonFiniteFunction

    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteFunction(f"f is not finite around component {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_errors(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """|a - g| / max(floor, |a| + |g|) per component."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    g = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return np.abs(a - g) / np.maximum(floor, np.abs(a) + np.abs(g))


def grad_check(f, analytic_grad, x, tolerance: float = 1e-4, h: float = FD_STEP) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    ``analytic_grad`` may be an array or a callable evaluated at ``x``. The
    relative-error floor scales with |f(x)| so that components lost in the
    difference quotient's round-off are not reported as mismatches.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = analytic_grad(x.copy()) if callable(analytic_grad) else analytic_grad
    floor = max(1e-8, FD_NOISE * abs(float(f(x.copy()))))
    errs = relative_errors(a, finite_diff(f, x, h), floor)
    worst = float(errs.max(initial=0.0))
    return GradCheckReport(worst, errs, worst <= tolerance, tolerance)

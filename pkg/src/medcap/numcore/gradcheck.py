"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    worst: tuple[int, tuple[int, ...]] | None = None


def numeric_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckResult:
    """Compare autodiff gradients of ``fn()`` w.r.t. ``inputs`` with central differences.

    An entry passes when its relative error is below ``rtol`` or its absolute
    error is below ``atol`` (the latter covers gradients near zero).
    Inputs should be float64 so the difference quotient is meaningful.
    """
    for x in inputs:
        x.grad = None
    backward(fn())
    max_rel = max_abs = 0.0
    worst = None
    passed = True
    for k, x in enumerate(inputs):
        analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
        numeric = numeric_gradient(fn, x, h)
        abs_err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel_err = np.where(scale > 0, abs_err / np.where(scale > 0, scale, 1.0), 0.0)
        bad = (rel_err >= rtol) & (abs_err >= atol)
        if bad.any():
            passed = False
            idx = np.unravel_index(int(np.argmax(np.where(bad, rel_err, -1))), x.shape)
            worst = (k, tuple(int(i) for i in idx))
        # relative error is only reported for gradients not already near zero
        meaningful = scale >= atol
        if meaningful.any():
            max_rel = max(max_rel, float(rel_err[meaningful].max()))
        max_abs = max(max_abs, float(abs_err.max(initial=0.0)))
    return GradCheckResult(max_rel, max_abs, passed, worst)

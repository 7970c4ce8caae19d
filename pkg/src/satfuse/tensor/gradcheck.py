"""Central finite-difference gradients, used as the oracle for every backward pass."""
from __future__ import annotations

from typing import Callable

import numpy as np

from satfuse.errors import EvaluationError
from satfuse.tensor.core import Tensor, no_grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    v = float(np.asarray(v))
    if not np.isfinite(v):
        raise EvaluationError(f"function returned non-finite value {v}")
    return v


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Approximate ``df/dx`` by ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` per element.

    ``x.data`` is perturbed in place and restored, so ``f`` may close over ``x``
    (e.g. a model parameter) instead of using its argument.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return Tensor(out.reshape(x.shape), dtype=x.dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error, floored so tiny gradients don't blow it up."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: list[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between backward() and finite differences over ``params``."""
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_diff_grad(lambda _x: loss_fn(), p, eps=eps)
        worst = max(worst, relative_error(analytic, numeric.data))
    return worst

"""Minimal dense-tensor engine with hand-written reverse-mode gradients."""
from satfuse.tensor.core import DEFAULT_DTYPE, Tensor, as_tensor, grad_enabled, no_grad
from satfuse.tensor.gradcheck import check_gradients, finite_diff_grad, relative_error
from satfuse.tensor.ops import *  # noqa: F401,F403
from satfuse.tensor.ops import __all__ as _ops_all
from satfuse.tensor import tsr

__all__ = [
    "DEFAULT_DTYPE", "Tensor", "as_tensor", "grad_enabled", "no_grad",
    "check_gradients", "finite_diff_grad", "relative_error", "tsr",
] + list(_ops_all)

"""
Central finite differences for checking hand-written reverse-mode gradients.
"""

import numpy as np

from ..prelude import *


def numeric_gradient(
    f: Callable[[], float], x: FloatArray, *, eps: float = 1e-6
) -> FloatArray:
    """
    Central-difference gradient of the scalar `f()` with respect to each element of `x`.

    `x` is perturbed in place and restored, so `f` should close over it.
    """
    if not x.flags.c_contiguous:
        raise ValueError("numeric_gradient needs a contiguous array to perturb")

    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for j in range(flat.size):
        x0 = flat[j]
        flat[j] = x0 + eps
        fplus = f()
        flat[j] = x0 - eps
        fminus = f()
        flat[j] = x0
        flat_grad[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(analytic: Any, numeric: Any) -> float:
    """
    `||a - n|| / (||n|| + 1e-8)`, the metric every gradient test uses.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - n) / (np.linalg.norm(n) + 1e-8))

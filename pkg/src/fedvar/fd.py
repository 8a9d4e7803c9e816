"""Central finite differences, the reference every analytic gradient is checked against."""

from __future__ import annotations

from typing import Callable

import numpy as np


def fd_gradient_oracle(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate ``i``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        hi, lo = f(x + e), f(x - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        grad.flat[i] = (hi - lo) / (2 * h)
    return grad


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued map, shape ``(len(f(x)), len(x))``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def assert_grad_close(analytic, numeric, rtol: float, atol: float = 1e-8) -> None:
    """Raise ``AssertionError`` when an analytic gradient strays from its oracle.

    The check is ``|a - n| <= atol + rtol * max(|n|_inf, 1)`` elementwise, i.e.
    relative to the gradient's overall scale rather than each entry.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.shape != numeric.shape:
        raise AssertionError(f"shape mismatch {analytic.shape} vs {numeric.shape}")
    scale = max(np.max(np.abs(numeric), initial=0.0), 1.0)
    err = np.max(np.abs(analytic - numeric), initial=0.0)
    if err > atol + rtol * scale:
        raise AssertionError(f"max gradient error {err:.3e} exceeds tolerance (scale {scale:.3e})")

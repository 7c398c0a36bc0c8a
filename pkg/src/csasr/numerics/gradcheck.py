"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from csasr.errors import UsageError
from csasr.numerics.tensor import Tape, Tensor


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.data.size != 1:
        raise UsageError(f"finite_diff_check: f must be scalar-valued, got shape {list(y.shape)}")
    tape.backward(y)
    return leaf.grad


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(x)).item()
        flat[i] = orig - h
        down = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 1e-7 <= h <= 1e-3:
        raise UsageError(f"finite_diff_check: step h={h} outside [1e-7, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    ana = analytic_grad(f, x)
    num = numeric_grad(f, x, h)
    return float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana)), initial=0.0))

"""Shared test oracles: central finite differences against reverse-mode grads."""

from __future__ import annotations

import numpy as np

from splitdrive.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one element at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.reshape(-1)
    base = x.astype(np.float64).copy()
    for i in range(base.size):
        hi = base.copy().reshape(-1)
        lo = base.copy().reshape(-1)
        hi[i] += eps
        lo[i] -= eps
        f_hi = f(hi.reshape(x.shape))
        f_lo = f(lo.reshape(x.shape))
        flat[i] = (f_hi - f_lo) / (2.0 * eps)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_grads(build_loss, arrays: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of build_loss against finite differences.

    `build_loss` maps {name: Tensor} to a scalar Tensor. Returns the worst
    relative error across all inputs.
    """
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with Tape() as tape:
        loss = build_loss(tensors)
        grads = tape.backward(loss)

    worst = 0.0
    for name, arr in arrays.items():
        def scalar_f(x, _name=name):
            probe = {k: Tensor(v) for k, v in arrays.items()}
            probe[_name] = Tensor(x)
            return build_loss(probe).item()

        numeric = numeric_grad(scalar_f, arr, eps=eps)
        analytic = grads.array(tensors[name])
        worst = max(worst, max_rel_err(analytic, numeric))
    return worst

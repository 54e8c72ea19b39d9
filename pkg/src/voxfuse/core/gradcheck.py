"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from voxfuse.core.tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5):
    """Central differences of the scalar ``fn()`` with respect to each param's data."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the graph from ``params`` on each call and return a scalar.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    analytic = [a.copy() for a in analytic]
    numeric = numerical_grad(fn, params, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


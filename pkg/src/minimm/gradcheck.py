"""Finite-difference gradient oracle.

Central differences in f64 are the reference every backward pass is judged
against; the oracle never touches the reverse-mode machinery.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def fd_gradient(f, params, h: float = 1e-5) -> dict:
    """Central-difference gradients of scalar ``f()`` w.r.t. each parameter.

    ``f`` must be deterministic and read the parameters' current buffers.
    Returns {id(param): array}; callers usually pair it with compare().
    """
    grads = {}
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[id(p)] = g.reshape(p.data.shape)
    return grads


def backward_gradients(loss_fn, params) -> dict:
    """Run reverse mode once and collect grads for ``params`` (zero if unused)."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("loss_fn must return a scalar tensor")
    loss.backward()
    return {id(p): (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Infinity-norm error of a vs b, relative to b's largest entry."""
    scale = max(float(np.abs(b).max()) if b.size else 0.0, 1e-12)
    return float(np.abs(a - b).max() / scale) if a.size else 0.0


def check_gradients(loss_fn, params, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare reverse mode against the oracle; returns the worst rel err."""
    analytic = backward_gradients(loss_fn, params)
    numeric = fd_gradient(loss_fn, params, h=h)
    worst = 0.0
    for p in params:
        worst = max(worst, max_rel_err(analytic[id(p)], numeric[id(p)]))
    if worst >= tol:
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} >= {tol:.1e}")
    return worst

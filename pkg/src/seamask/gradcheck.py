"""Central finite-difference gradient checking.

The checker only ever calls the forward pass, so it stays independent of the
backward implementations it is used to verify.
"""

from __future__ import annotations

import numpy as np

from .tape import Tensor, zero_grads


def finite_difference_gradient(loss_fn, param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued forward pass w.r.t. one tensor."""
    grad = np.empty_like(param.value)
    flat = param.value.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().value)
        flat[i] = orig - step
        lo = float(loss_fn().value)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(loss_fn, params: dict, step: float = 1e-5, floor: float = 1e-7) -> dict:
    """Max per-tensor relative error between backprop and finite differences.

    loss_fn rebuilds the graph from the live parameter values on every call.
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.items()
    }
    report = {}
    for name, t in params.items():
        fd = finite_difference_gradient(loss_fn, t, step)
        report[name] = max_relative_error(analytic[name], fd, floor)
    return report

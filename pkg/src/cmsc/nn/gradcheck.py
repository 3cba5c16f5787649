"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from cmsc.nn.layers import Module


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_module(module: Module, inputs, *, eps: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Compare analytic and numerical gradients of ``sum(R * module(inputs))``.

    ``inputs`` is an array or a tuple of arrays (two-input layers).  Returns the
    relative error for each input (``input0``, ...) and each parameter.
    """
    rng = np.random.default_rng(seed)
    multi = isinstance(inputs, tuple)
    xs = list(inputs) if multi else [inputs]
    out = module.forward(tuple(xs) if multi else xs[0])
    weight = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(weight * module.forward(tuple(xs) if multi else xs[0])))

    loss()
    module.zero_grad()
    g = module.backward(weight)
    gin = list(g) if multi else [g]
    analytic_params = {k: v.copy() for k, v in module.named_grads()}

    errors = {}
    for i, x in enumerate(xs):
        errors[f"input{i}"] = relative_error(gin[i], numerical_gradient(loss, x, eps))
    for name, p in module.named_parameters():
        errors[name] = relative_error(analytic_params[name], numerical_gradient(loss, p, eps))
    return errors

"""Shared oracle helpers: dense Jacobian assembly and parameter flattening.

Dense Jacobians live here on purpose; the library itself only ever touches
them through jvp/vjp products.
"""

from __future__ import annotations

import numpy as np

from aajrlab.policy import Layer, PolicyParams, jvp


def assemble_jacobian(params: PolicyParams, s) -> np.ndarray:
    """Column-by-column Jacobian via jvp against basis vectors."""
    d = params.in_dim
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        cols.append(jvp(params, s, e))
    return np.stack(cols, axis=1)


def flatten_params(params: PolicyParams) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in params.layers])


def unflatten_params(params: PolicyParams, vec: np.ndarray) -> PolicyParams:
    layers = []
    i = 0
    for l in params.layers:
        nw = l.weight.size
        W = vec[i : i + nw].reshape(l.weight.shape)
        i += nw
        b = vec[i : i + l.bias.size]
        i += l.bias.size
        layers.append(Layer(W, b, l.activation))
    return PolicyParams(tuple(layers))


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def fd_param_gradient(params: PolicyParams, objective, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of eval_objective over every parameter."""
    from aajrlab.policy import eval_objective

    x0 = flatten_params(params)
    grad = np.zeros_like(x0)
    for i in range(len(x0)):
        e = np.zeros_like(x0)
        e[i] = h
        fp = eval_objective(unflatten_params(params, x0 + e), objective)
        fm = eval_objective(unflatten_params(params, x0 - e), objective)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def linear_policy(W: np.ndarray, bias=None) -> PolicyParams:
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return PolicyParams((Layer(W, b, "identity"),))

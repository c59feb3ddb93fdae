"""MLP policies with exact input-space and parameter-space derivatives.

The same layer recursion is written once and executed either on plain
ndarrays (fast value paths used by the inner loop) or on tape ``Node``
weights (parameter gradients). Forward-mode propagation supplies
Jacobian-vector products; a dedicated reverse pass supplies
transposed-Jacobian-vector products. Jacobians are never materialized
here; tests assemble them column-by-column when they need a dense oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .tape import Node, backward, tanh

Array = np.ndarray

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True, eq=False)
class Layer:
    weight: Array  # (out, in)
    bias: Array  # (out,)
    activation: str


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Weights of a deterministic MLP policy mapping states to actions.

    Layer dimensions must chain, every entry must be finite, and the final
    activation must be the identity so actions are unconstrained. Only
    smooth activations are allowed, which keeps the policy differentiable
    everywhere with bounded second derivatives.
    """

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("policy needs at least one layer")
        fixed = []
        for k, layer in enumerate(self.layers):
            W = np.asarray(layer.weight, dtype=np.float64)
            b = np.asarray(layer.bias, dtype=np.float64)
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ConfigError(f"layer {k}: weight {W.shape} and bias {b.shape} do not agree")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {k}: non-finite parameter entries")
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {k}: unknown activation '{layer.activation}'")
            if k > 0 and W.shape[1] != fixed[-1].weight.shape[0]:
                raise ConfigError(
                    f"layer {k}: input size {W.shape[1]} does not chain with "
                    f"previous output size {fixed[-1].weight.shape[0]}"
                )
            fixed.append(Layer(W, b, layer.activation))
        if fixed[-1].activation != "identity":
            raise ConfigError("final layer activation must be identity")
        object.__setattr__(self, "layers", tuple(fixed))

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.weight.shape[0] for layer in self.layers]

    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]


def init_policy(dims: Sequence[int], activations: Sequence[str] | None = None, seed: int = 0) -> PolicyParams:
    """Seeded uniform init in [-a, a] with a = 1/sqrt(fan_in)."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"policy dims must be >= 2 positive sizes, got {dims}")
    if activations is None:
        activations = ["tanh"] * (len(dims) - 2) + ["identity"]
    activations = list(activations)
    if len(activations) != len(dims) - 1:
        raise ConfigError(f"expected {len(dims) - 1} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(dims) - 1):
        fan_in = dims[k]
        a = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-a, a, size=(dims[k + 1], fan_in))
        b = rng.uniform(-a, a, size=dims[k + 1])
        layers.append(Layer(W, b, activations[k]))
    return PolicyParams(tuple(layers))


def scale_policy(params: PolicyParams, factor: float) -> PolicyParams:
    """Scale every weight and bias by a positive factor."""
    return PolicyParams(
        tuple(Layer(layer.weight * factor, layer.bias * factor, layer.activation) for layer in params.layers)
    )


# -- shared computation description ----------------------------------------


def _mlp_forward(layers, activations, x):
    h = x
    for (W, b), act in zip(layers, activations):
        a = W @ h + b
        h = tanh(a) if act == "tanh" else a
    return h


def _mlp_jvp(layers, activations, x, v):
    h, t = x, v
    for (W, b), act in zip(layers, activations):
        a = W @ h + b
        u = W @ t
        if act == "tanh":
            y = tanh(a)
            h = y
            t = (1.0 - y * y) * u
        else:
            h, t = a, u
    return t


@dataclass(frozen=True, eq=False)
class PolicyHandle:
    """Policy evaluated over either ndarray or tape-Node weights."""

    layers: tuple
    activations: tuple[str, ...]

    def forward(self, x):
        return _mlp_forward(self.layers, self.activations, x)

    def jvp(self, x, v):
        return _mlp_jvp(self.layers, self.activations, x, v)


def numpy_handle(params: PolicyParams) -> PolicyHandle:
    return PolicyHandle(
        tuple((layer.weight, layer.bias) for layer in params.layers),
        tuple(params.activations()),
    )


def _check_vector(x, dim: int, what: str) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ConfigError(f"{what} has shape {x.shape}, expected ({dim},)")
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite entries")
    return x


def forward(params: PolicyParams, s) -> Array:
    """Evaluate the policy at a state."""
    s = _check_vector(s, params.in_dim, "state")
    return _mlp_forward([(l.weight, l.bias) for l in params.layers], params.activations(), s)


def jvp(params: PolicyParams, s, v) -> Array:
    """Directional derivative of the policy output along v (forward mode)."""
    s = _check_vector(s, params.in_dim, "state")
    v = _check_vector(v, params.in_dim, "tangent")
    return _mlp_jvp([(l.weight, l.bias) for l in params.layers], params.activations(), s, v)


def vjp(params: PolicyParams, s, w) -> Array:
    """Pull a cotangent on the action back to the state (reverse mode)."""
    s = _check_vector(s, params.in_dim, "state")
    w = _check_vector(w, params.out_dim, "cotangent")
    pres = []
    h = s
    for layer in params.layers:
        a = layer.weight @ h + layer.bias
        pres.append(a)
        h = np.tanh(a) if layer.activation == "tanh" else a
    g = w
    for layer, a in zip(reversed(params.layers), reversed(pres)):
        if layer.activation == "tanh":
            y = np.tanh(a)
            g = (1.0 - y * y) * g
        g = layer.weight.T @ g
    return g


Objective = Callable[[PolicyHandle], object]


def eval_objective(params: PolicyParams, objective: Objective) -> float:
    """Evaluate an objective on plain ndarrays (no tape)."""
    out = objective(numpy_handle(params))
    return float(out)


def param_gradient(params: PolicyParams, objective: Objective):
    """Gradient of a scalar objective with respect to all weights and biases.

    The objective receives a ``PolicyHandle`` whose ``forward``/``jvp`` build
    the tape; it must combine their outputs into a scalar. Returns the
    objective value and one (dweight, dbias) pair per layer. An objective
    that never touches the handle has an exactly zero gradient.
    """
    leaves = tuple(
        (Node(layer.weight, op="weight"), Node(layer.bias, op="bias")) for layer in params.layers
    )
    handle = PolicyHandle(leaves, tuple(params.activations()))
    out = objective(handle)
    if not isinstance(out, Node):
        value = float(out)
        if not np.isfinite(value):
            raise NumericError("objective value is non-finite")
        zeros = [
            (np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in params.layers
        ]
        return value, zeros
    if out.value.shape != ():
        raise ConfigError(f"objective must be scalar, got shape {out.value.shape}")
    backward(out)
    grads = []
    for (wn, bn), layer in zip(leaves, params.layers):
        dW = wn.grad if wn.grad is not None else np.zeros_like(layer.weight)
        db = bn.grad if bn.grad is not None else np.zeros_like(layer.bias)
        grads.append((np.asarray(dW, dtype=np.float64), np.asarray(db, dtype=np.float64)))
    return float(out.value), grads


def apply_gradient_step(params: PolicyParams, grads, lr: float) -> PolicyParams:
    """One plain gradient-descent update; returns a new parameter snapshot."""
    layers = []
    for layer, (dW, db) in zip(params.layers, grads):
        layers.append(Layer(layer.weight - lr * dW, layer.bias - lr * db, layer.activation))
    return PolicyParams(tuple(layers))


def gradient_norm(grads) -> float:
    total = 0.0
    for dW, db in grads:
        total += float(np.sum(dW * dW)) + float(np.sum(db * db))
    return float(np.sqrt(total))


# -- checkpoint format ------------------------------------------------------


def save_checkpoint(params: PolicyParams, path) -> None:
    payload = {
        "dims": params.dims(),
        "activations": params.activations(),
        "layers": [
            {"weight": [float(x) for x in layer.weight.ravel()], "bias": [float(x) for x in layer.bias]}
            for layer in params.layers
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_checkpoint(path) -> PolicyParams:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    for key in ("dims", "activations", "layers"):
        if key not in payload:
            raise ConfigError(f"checkpoint {path} is missing key '{key}'")
    dims = payload["dims"]
    acts = payload["activations"]
    raw_layers = payload["layers"]
    if len(raw_layers) != len(dims) - 1 or len(acts) != len(dims) - 1:
        raise ConfigError(f"checkpoint {path}: dims/activations/layers do not agree")
    layers = []
    for k, raw in enumerate(raw_layers):
        out_dim, in_dim = int(dims[k + 1]), int(dims[k])
        W = np.asarray(raw["weight"], dtype=np.float64)
        if W.size != out_dim * in_dim:
            raise ConfigError(f"checkpoint {path}: layer {k} weight has {W.size} entries, expected {out_dim * in_dim}")
        b = np.asarray(raw["bias"], dtype=np.float64)
        if b.shape != (out_dim,):
            raise ConfigError(f"checkpoint {path}: layer {k} bias has shape {b.shape}, expected ({out_dim},)")
        layers.append(Layer(W.reshape(out_dim, in_dim), b, acts[k]))
    return PolicyParams(tuple(layers))

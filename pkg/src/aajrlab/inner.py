"""Projected gradient ascent over a norm-ball perturbation set.

The run records everything later checks need: iterates, normalized ascent
directions, unit update directions, objective values, exact inner
gradients, and the directional amplification ||J(s + delta_t) u_t||_2 at
every step. Trajectories are immutable after construction (arrays are
marked read-only) and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .environments import Environment, loss, loss_grad
from .errors import ConfigError, NumericError
from .policy import PolicyParams, forward, jvp, vjp

Array = np.ndarray


@dataclass(frozen=True, eq=False)
class PerturbationSet:
    """Norm ball {delta : ||delta||_p <= epsilon}, p in {2, inf}.

    epsilon = 0 degenerates to the singleton {0}; the command-line config
    rejects that, but the API keeps it legal so vacuous cases stay testable.
    """

    p: float
    epsilon: float
    dim: int

    def __post_init__(self):
        p = float(self.p)
        if p not in (2.0, math.inf):
            raise ConfigError(f"norm order must be 2 or inf, got {self.p}")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")
        if int(self.dim) < 1:
            raise ConfigError("perturbation dimension must be >= 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "dim", int(self.dim))

    def norm(self, delta: Array) -> float:
        if self.p == 2.0:
            return _safe_l2(np.asarray(delta, dtype=np.float64))
        return float(np.max(np.abs(delta))) if delta.size else 0.0

    def contains(self, delta: Array, tol: float = 0.0) -> bool:
        return self.norm(np.asarray(delta, dtype=np.float64)) <= self.epsilon + tol


@dataclass(frozen=True)
class InnerLoopConfig:
    eta: float
    steps: int
    eps0: float = 1e-8

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("inner step size eta must be > 0")
        if int(self.steps) < 0:
            raise ConfigError("inner step count must be >= 0")
        if not self.eps0 > 0:
            raise ConfigError("direction floor eps0 must be > 0")
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "eps0", float(self.eps0))


@dataclass(frozen=True, eq=False)
class Trajectory:
    deltas: tuple[Array, ...]  # K + 1 iterates, deltas[0] == 0
    ascent_dirs: tuple[Array, ...]  # K normalized ascent directions
    update_dirs: tuple[Array | None, ...]  # K unit steps; None when the iterate did not move
    inner_values: tuple[float, ...]  # K + 1 objective values
    inner_grads: tuple[Array, ...]  # K + 1 exact inner gradients
    dir_amps: tuple[float, ...]  # K directional amplifications ||J u_t||

    @property
    def steps(self) -> int:
        return len(self.ascent_dirs)

    @property
    def delta_star(self) -> Array:
        return self.deltas[-1]


def _safe_l2(x: Array) -> float:
    """l2 norm that cannot overflow on finite input."""
    m = float(np.max(np.abs(x))) if x.size else 0.0
    if m == 0.0 or not np.isfinite(m):
        return m
    return m * float(np.linalg.norm(x / m))


def project(delta, pset: PerturbationSet) -> Array:
    """Euclidean projection onto the norm ball."""
    delta = np.asarray(delta, dtype=np.float64)
    if pset.p == 2.0:
        n = _safe_l2(delta)
        if n > pset.epsilon:
            return (delta / n) * pset.epsilon
        return delta.copy()
    return np.clip(delta, -pset.epsilon, pset.epsilon)


def ascent_direction(grad, eps0: float) -> Array:
    """grad / (||grad||_2 + eps0); strictly shorter than a unit vector."""
    grad = np.asarray(grad, dtype=np.float64)
    return grad / (np.linalg.norm(grad) + eps0)


def _frozen(arr: Array) -> Array:
    out = np.asarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def pga_run(
    params: PolicyParams,
    s,
    context,
    env: Environment,
    pset: PerturbationSet,
    cfg: InnerLoopConfig,
) -> Trajectory:
    """Run K projected gradient ascent steps on delta -> L(pi(s + delta), a).

    delta_0 = 0 and delta_{t+1} = project(delta_t + eta * grad g(delta_t)).
    Deterministic; raises NumericError naming the step if the objective or
    its gradient turns non-finite.
    """
    s = np.asarray(s, dtype=np.float64)
    if pset.dim != params.in_dim or s.shape != (params.in_dim,):
        raise ConfigError(
            f"state dim {s.shape}, policy input {params.in_dim}, and perturbation dim {pset.dim} must agree"
        )

    def value_and_grad(delta, step):
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"non-finite iterate at step {step}")
        x = s + delta
        z = forward(params, x)
        g = loss(env, z, context)
        grad = vjp(params, x, loss_grad(env, z, context))
        if not (np.isfinite(g) and np.all(np.isfinite(grad))):
            raise NumericError(f"non-finite inner objective at step {step}")
        return g, grad

    delta = np.zeros(pset.dim)
    deltas = [_frozen(delta)]
    values: list[float] = []
    grads: list[Array] = []
    ascent_dirs: list[Array] = []
    update_dirs: list[Array | None] = []
    dir_amps: list[float] = []

    for t in range(cfg.steps):
        g, grad = value_and_grad(delta, t)
        values.append(g)
        grads.append(_frozen(grad))
        u = ascent_direction(grad, cfg.eps0)
        ascent_dirs.append(_frozen(u))
        dir_amps.append(float(np.linalg.norm(jvp(params, s + delta, u))))
        new_delta = project(delta + cfg.eta * grad, pset)
        if np.array_equal(new_delta, delta):
            update_dirs.append(None)
        else:
            step_vec = new_delta - delta
            update_dirs.append(_frozen(step_vec / np.linalg.norm(step_vec)))
        delta = new_delta
        deltas.append(_frozen(delta))

    g, grad = value_and_grad(delta, cfg.steps)
    values.append(g)
    grads.append(_frozen(grad))

    return Trajectory(
        deltas=tuple(deltas),
        ascent_dirs=tuple(ascent_dirs),
        update_dirs=tuple(update_dirs),
        inner_values=tuple(values),
        inner_grads=tuple(grads),
        dir_amps=tuple(dir_amps),
    )


def trajectory_records(traj: Trajectory) -> list[dict]:
    """One JSON-able record per iterate; direction fields are null at the end."""
    records = []
    for t, delta in enumerate(traj.deltas):
        last = t == len(traj.deltas) - 1
        records.append(
            {
                "t": t,
                "delta": [float(x) for x in delta],
                "u": None if last else [float(x) for x in traj.ascent_dirs[t]],
                "v": None
                if last or traj.update_dirs[t] is None
                else [float(x) for x in traj.update_dirs[t]],
                "g": float(traj.inner_values[t]),
                "grad_norm": float(np.linalg.norm(traj.inner_grads[t])),
                "dir_amp": None if last else float(traj.dir_amps[t]),
            }
        )
    return records


def dump_trajectory(traj: Trajectory, fp) -> None:
    """Write the trajectory as JSON lines."""
    for record in trajectory_records(traj):
        fp.write(json.dumps(record) + "\n")

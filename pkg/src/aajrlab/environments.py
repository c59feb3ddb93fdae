"""Synthetic congestion losses with analytically known smoothness constants.

Two loss families over the action z and the observable peer demand a:

* ``quadratic_congestion``:  L = 1/2 ||z + A a - c||^2, Hessian = I, so the
  gradient is 1-Lipschitz exactly.
* ``softplus_congestion``:   L = sum_j softplus(beta * (z + A a - c)_j),
  diagonal Hessian bounded by beta^2 / 4.

An optional orthogonal projector replaces the quadratic residual with its
projection, which confines loss gradients to a chosen subspace (used by the
expressivity witness checks). Samplers are seeded and deterministic; in
``mirror`` mode the peer demand equals the drawn state, which makes the
task state-dependent and lets sensitivity budgets actually bind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tape import dot, sigmoid, softplus, vsum

Array = np.ndarray

KINDS = ("quadratic_congestion", "softplus_congestion")
PEER_MODES = ("independent", "mirror")


@dataclass(frozen=True, eq=False)
class Environment:
    kind: str
    c: Array  # target, (m,)
    A: Array  # peer coupling, (m, q)
    state_dim: int
    beta: float | None = None
    seed: int = 0
    peer_mode: str = "independent"
    projector: Array | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown environment kind '{self.kind}'")
        c = np.asarray(self.c, dtype=np.float64)
        A = np.asarray(self.A, dtype=np.float64)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise ConfigError("target c must be a finite vector")
        if A.ndim != 2 or A.shape[0] != c.shape[0] or not np.all(np.isfinite(A)):
            raise ConfigError(f"coupling A must be a finite ({c.shape[0]}, q) matrix, got {A.shape}")
        if int(self.state_dim) < 1:
            raise ConfigError("state_dim must be >= 1")
        if self.kind == "softplus_congestion":
            if self.beta is None or not self.beta > 0:
                raise ConfigError("softplus_congestion needs beta > 0")
        elif self.beta is not None:
            raise ConfigError("beta is only meaningful for softplus_congestion")
        if self.peer_mode not in PEER_MODES:
            raise ConfigError(f"unknown peer_mode '{self.peer_mode}'")
        if self.peer_mode == "mirror" and A.shape[1] != int(self.state_dim):
            raise ConfigError("mirror peer_mode requires the peer dimension to equal state_dim")
        if int(self.seed) < 0:
            raise ConfigError("environment seed must be >= 0")
        P = self.projector
        if P is not None:
            if self.kind != "quadratic_congestion":
                raise ConfigError("projector is only supported with quadratic_congestion")
            P = np.asarray(P, dtype=np.float64)
            m = c.shape[0]
            if P.shape != (m, m):
                raise ConfigError(f"projector must be ({m}, {m}), got {P.shape}")
            if np.max(np.abs(P - P.T)) > 1e-9 or np.max(np.abs(P @ P - P)) > 1e-9:
                raise ConfigError("projector must be symmetric and idempotent")
            if np.max(np.abs(P)) == 0.0:
                raise ConfigError("projector must be nonzero")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "state_dim", int(self.state_dim))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "projector", P)

    @property
    def action_dim(self) -> int:
        return self.c.shape[0]

    @property
    def peer_dim(self) -> int:
        return self.A.shape[1]


def _draw(env: Environment, rng: np.random.Generator):
    s = rng.uniform(-1.0, 1.0, env.state_dim)
    a = s.copy() if env.peer_mode == "mirror" else rng.uniform(-1.0, 1.0, env.peer_dim)
    return s, a


def sample(env: Environment, seed: int):
    """Deterministic draw of (state, peer context) for a non-negative seed."""
    if int(seed) < 0:
        raise ConfigError("sample seed must be >= 0")
    return _draw(env, np.random.default_rng([env.seed, int(seed)]))


def _check_pair(env: Environment, z, a):
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if z.shape != (env.action_dim,):
        raise ConfigError(f"action has shape {z.shape}, expected ({env.action_dim},)")
    if a.shape != (env.peer_dim,):
        raise ConfigError(f"peer context has shape {a.shape}, expected ({env.peer_dim},)")
    return z, a


def loss_term(env: Environment, z, a):
    """Loss as a tape-generic expression; z may be an ndarray or a Node."""
    offset = env.A @ np.asarray(a, dtype=np.float64) - env.c
    r = z + offset
    if env.kind == "quadratic_congestion":
        if env.projector is not None:
            r = env.projector @ r
        return 0.5 * dot(r, r)
    return vsum(softplus(env.beta * r))


def loss(env: Environment, z, a) -> float:
    z, a = _check_pair(env, z, a)
    return float(loss_term(env, z, a))


def loss_grad(env: Environment, z, a) -> Array:
    z, a = _check_pair(env, z, a)
    r = z + env.A @ a - env.c
    if env.kind == "quadratic_congestion":
        if env.projector is not None:
            return env.projector @ r
        return r
    return env.beta * sigmoid(env.beta * r)


def loss_hessian(env: Environment, z, a) -> Array:
    z, a = _check_pair(env, z, a)
    if env.kind == "quadratic_congestion":
        if env.projector is not None:
            return env.projector.copy()
        return np.eye(env.action_dim)
    r = z + env.A @ a - env.c
    sig = sigmoid(env.beta * r)
    return np.diag(env.beta**2 * sig * (1.0 - sig))


def loss_hessian_bound(env: Environment) -> float:
    """Exact Lipschitz constant of the loss gradient in the action."""
    if env.kind == "quadratic_congestion":
        return 1.0
    if env.kind == "softplus_congestion":
        return env.beta**2 / 4.0
    raise ConfigError(f"unknown environment kind '{env.kind}'")

"""Sensitivity penalties: the trajectory-aligned directional penalty, a
global spectral-norm hinge baseline, and power-iteration spectral norms.

The directional penalty averages ||J(s + delta_t) u_t||_2^2 over the
recorded ascent steps with the directions held constant: trajectories are
computed before the penalty is differentiated, so no gradient ever flows
through u_t. Spectral norms come from power iteration on J^T J driven by
jvp/vjp pairs; when differentiated, the converged singular vector is held
fixed and the gradient flows only through the final product.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .inner import Trajectory
from .policy import PolicyHandle, PolicyParams, jvp, numpy_handle, vjp
from .tape import dot, relu, sqrt

Array = np.ndarray


@dataclass(frozen=True)
class RegularizerConfig:
    lam: float  # penalty weight
    gamma: float  # global sensitivity budget
    gamma_adv: float  # directional budget (hinge form only)
    power_iters: int = 20
    power_tol: float = 1e-9
    aajr_hinge: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError("penalty weight lambda must be >= 0")
        if not self.gamma > 0:
            raise ConfigError("global budget gamma must be > 0")
        if not self.gamma_adv > 0:
            raise ConfigError("directional budget gamma_adv must be > 0")
        if int(self.power_iters) < 1:
            raise ConfigError("power_iters must be >= 1")
        if not self.power_tol > 0:
            raise ConfigError("power_tol must be > 0")
        object.__setattr__(self, "power_iters", int(self.power_iters))


def aajr_term(handle: PolicyHandle, s, traj: Trajectory, cfg: RegularizerConfig | None = None):
    """Penalty as a tape-generic expression; 0.0 when the trajectory is empty."""
    if traj.steps == 0:
        return 0.0
    hinge = bool(cfg and cfg.aajr_hinge)
    total = None
    for delta, u in zip(traj.deltas[:-1], traj.ascent_dirs):
        amp_vec = handle.jvp(s + delta, u)
        if hinge:
            excess = relu(sqrt(dot(amp_vec, amp_vec)) - cfg.gamma_adv)
            term = excess * excess
        else:
            term = dot(amp_vec, amp_vec)
        total = term if total is None else total + term
    return total * (1.0 / traj.steps)


def aajr_penalty(params: PolicyParams, s, traj: Trajectory, cfg: RegularizerConfig | None = None) -> float:
    """Mean squared directional amplification along the recorded trajectory."""
    if traj.steps == 0:
        warnings.warn("trajectory has no ascent steps; directional penalty is 0", stacklevel=2)
        return 0.0
    return float(aajr_term(numpy_handle(params), np.asarray(s, dtype=np.float64), traj, cfg))


def _power_iteration(params: PolicyParams, s, iters: int, tol: float, seed: int = 0):
    """Largest singular value of J(s) and the matching right singular vector.

    Lower bound up to convergence tolerance: the estimate is ||J v|| for a
    unit vector v, which never exceeds the true spectral norm.
    """
    s = np.asarray(s, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(params.in_dim)
    v /= np.linalg.norm(v)
    sigma_prev = None
    sigma = 0.0
    for _ in range(iters):
        w = jvp(params, s, v)
        if not np.all(np.isfinite(w)):
            raise NumericError("non-finite iterate in power iteration")
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return 0.0, v
        back = vjp(params, s, w)
        nb = np.linalg.norm(back)
        if nb == 0.0:
            return sigma, v
        v = back / nb
        if sigma_prev is not None and abs(sigma - sigma_prev) < tol:
            break
        sigma_prev = sigma
    sigma = float(np.linalg.norm(jvp(params, s, v)))
    return sigma, v


def spectral_norm(params: PolicyParams, s, cfg: RegularizerConfig) -> float:
    """Power-iteration estimate of ||J(s)||_2 with a seeded start vector."""
    sigma, _ = _power_iteration(params, s, cfg.power_iters, cfg.power_tol)
    return sigma


def global_term(handle: PolicyHandle, params: PolicyParams, states, cfg: RegularizerConfig):
    """Mean hinge^2 above gamma as a tape-generic expression.

    Power iteration runs untaped to find the top singular direction; the
    differentiable part is ||J v_hat|| with v_hat fixed.
    """
    states = list(states)
    if not states:
        raise ConfigError("global penalty needs at least one state")
    total = None
    for s in states:
        s = np.asarray(s, dtype=np.float64)
        _, v_hat = _power_iteration(params, s, cfg.power_iters, cfg.power_tol)
        w = handle.jvp(s, v_hat)
        excess = relu(sqrt(dot(w, w)) - cfg.gamma)
        term = excess * excess
        total = term if total is None else total + term
    return total * (1.0 / len(states))


def global_penalty(params: PolicyParams, states, cfg: RegularizerConfig) -> float:
    """Mean over states of max(0, ||J(s)||_2 - gamma)^2."""
    return float(global_term(numpy_handle(params), params, states, cfg))

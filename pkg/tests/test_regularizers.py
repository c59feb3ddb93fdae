"""Directional penalty and spectral norms against dense linear-algebra oracles."""

from __future__ import annotations

import numpy as np
import pytest

from aajrlab.environments import Environment, sample
from aajrlab.errors import ConfigError
from aajrlab.inner import InnerLoopConfig, PerturbationSet, Trajectory, pga_run
from aajrlab.policy import init_policy, numpy_handle, scale_policy
from aajrlab.regularizers import (
    RegularizerConfig,
    aajr_penalty,
    aajr_term,
    global_penalty,
    spectral_norm,
)

from conftest import assemble_jacobian, linear_policy


def reg(lam=0.0, gamma=1.0, gamma_adv=1.0, **kw):
    return RegularizerConfig(lam=lam, gamma=gamma, gamma_adv=gamma_adv, **kw)


def fixed_trajectory(deltas, us):
    """Trajectory stub with explicit iterates and ascent directions."""
    deltas = [np.asarray(d, dtype=float) for d in deltas]
    us = [np.asarray(u, dtype=float) for u in us]
    K = len(us)
    d = len(deltas[0])
    return Trajectory(
        deltas=tuple(deltas),
        ascent_dirs=tuple(us),
        update_dirs=tuple([None] * K),
        inner_values=tuple([0.0] * (K + 1)),
        inner_grads=tuple([np.zeros(d)] * (K + 1)),
        dir_amps=tuple([0.0] * K),
    )


def test_aajr_linear_single_step():
    p = linear_policy(np.array([[2.0, 0.0], [0.0, 1.0]]))
    traj = fixed_trajectory([np.zeros(2), np.zeros(2)], [np.array([1.0, 0.0])])
    assert aajr_penalty(p, np.zeros(2), traj) == pytest.approx(4.0, abs=0.0)


def test_aajr_zero_policy():
    p = linear_policy(np.zeros((2, 2)))
    traj = fixed_trajectory([np.zeros(2), np.zeros(2)], [np.array([0.6, 0.8])])
    assert aajr_penalty(p, np.zeros(2), traj) == 0.0


def test_aajr_matches_assembled_jacobian_oracle():
    env = Environment(kind="quadratic_congestion", c=np.array([0.4, -0.9, 0.1]), A=np.zeros((3, 3)), state_dim=3)
    params = init_policy([3, 6, 3], seed=2)
    pset = PerturbationSet(p=2, epsilon=0.5, dim=3)
    s, a = sample(env, 4)
    traj = pga_run(params, s, a, env, pset, InnerLoopConfig(eta=0.4, steps=3))
    expected = np.mean(
        [
            np.linalg.norm(assemble_jacobian(params, s + delta) @ u) ** 2
            for delta, u in zip(traj.deltas[:-1], traj.ascent_dirs)
        ]
    )
    assert aajr_penalty(params, s, traj) == pytest.approx(expected, rel=1e-12)


def test_aajr_empty_trajectory_warns_and_returns_zero():
    p = linear_policy(np.eye(2))
    traj = fixed_trajectory([np.zeros(2)], [])
    with pytest.warns(UserWarning):
        assert aajr_penalty(p, np.zeros(2), traj) == 0.0


def test_aajr_hinge_form():
    p = linear_policy(np.array([[2.0, 0.0], [0.0, 1.0]]))
    traj = fixed_trajectory(
        [np.zeros(2), np.zeros(2), np.zeros(2)],
        [np.array([1.0, 0.0]), np.array([0.0, 1.0])],
    )
    cfg = reg(gamma_adv=1.5, aajr_hinge=True)
    # amplifications are 2 and 1: hinge terms (2-1.5)^2 and 0
    expected = 0.5 * (0.5**2 + 0.0)
    assert aajr_penalty(p, np.zeros(2), traj, cfg) == pytest.approx(expected, abs=1e-15)


def test_aajr_bounded_by_max_operator_norm():
    env = Environment(kind="quadratic_congestion", c=np.array([0.3, 0.3]), A=np.zeros((2, 2)), state_dim=2)
    for seed in range(10):
        params = init_policy([2, 5, 2], seed=seed)
        pset = PerturbationSet(p=2, epsilon=0.6, dim=2)
        s, a = sample(env, seed)
        traj = pga_run(params, s, a, env, pset, InnerLoopConfig(eta=0.5, steps=4))
        if traj.steps == 0:
            continue
        worst = max(
            np.linalg.norm(assemble_jacobian(params, s + delta), 2) for delta in traj.deltas[:-1]
        )
        assert aajr_penalty(params, s, traj) <= worst**2 + 1e-9


def test_spectral_norm_diagonal():
    p = linear_policy(np.diag([1.0, 2.0]))
    assert spectral_norm(p, np.zeros(2), reg()) == pytest.approx(2.0, abs=1e-9)


def test_spectral_norm_zero_policy():
    p = linear_policy(np.zeros((3, 3)))
    assert spectral_norm(p, np.zeros(3), reg()) == 0.0


def test_spectral_norm_matches_gram_eigensolve():
    rng = np.random.default_rng(6)
    W = rng.standard_normal((4, 3))
    p = linear_policy(W)
    expected = float(np.sqrt(np.max(np.linalg.eigvalsh(W.T @ W))))
    got = spectral_norm(p, np.zeros(3), reg(power_iters=100, power_tol=1e-13))
    assert got == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("dims", [(2, 2), (4, 3), (8, 8), (3, 8)])
def test_spectral_norm_matches_dense_svd_linear(dims):
    rng = np.random.default_rng(sum(dims))
    W = rng.standard_normal(dims)
    p = linear_policy(W)
    expected = float(np.linalg.svd(W, compute_uv=False)[0])
    got = spectral_norm(p, np.zeros(dims[1]), reg(power_iters=200, power_tol=1e-14))
    assert got == pytest.approx(expected, rel=1e-6)


def test_spectral_norm_scaling_linearity():
    rng = np.random.default_rng(12)
    W = rng.standard_normal((3, 3))
    p = linear_policy(W)
    cfg = reg(power_iters=100, power_tol=1e-13)
    base = spectral_norm(p, np.zeros(3), cfg)
    for c in (0.5, 2.0, 7.25):
        scaled = spectral_norm(scale_policy(p, c), np.zeros(3), cfg)
        assert scaled == pytest.approx(c * base, rel=1e-9)


def test_spectral_norm_is_lower_bound_on_tanh_net():
    params = init_policy([4, 6, 3], seed=3)
    s = np.full(4, 0.2)
    est = spectral_norm(params, s, reg(power_iters=100, power_tol=1e-13))
    dense = np.linalg.norm(assemble_jacobian(params, s), 2)
    assert est <= dense + 1e-12
    assert est == pytest.approx(dense, rel=1e-9)


def test_global_penalty_inactive_hinge():
    p = linear_policy(np.diag([0.3, 0.5]))
    states = [np.zeros(2), np.ones(2)]
    assert global_penalty(p, states, reg(gamma=1.0)) == 0.0


def test_global_penalty_single_state():
    p = linear_policy(np.diag([3.0, 3.0]))
    assert global_penalty(p, [np.zeros(2)], reg(gamma=1.0, power_iters=100, power_tol=1e-13)) == pytest.approx(
        4.0, rel=1e-9
    )


def test_global_penalty_matches_per_state_loop():
    rng = np.random.default_rng(8)
    params = init_policy([3, 5, 3], seed=8)
    params = scale_policy(params, 3.0)
    cfg = reg(gamma=0.4, power_iters=100, power_tol=1e-13)
    states = [rng.uniform(-1, 1, 3) for _ in range(4)]
    expected = np.mean([max(0.0, spectral_norm(params, s, cfg) - cfg.gamma) ** 2 for s in states])
    assert global_penalty(params, states, cfg) == pytest.approx(expected, rel=1e-12)


def test_global_penalty_empty_states_rejected():
    p = linear_policy(np.eye(2))
    with pytest.raises(ConfigError):
        global_penalty(p, [], reg())


def test_aajr_term_taped_matches_value():
    # the taped expression evaluated over ndarrays must equal the public value
    env = Environment(kind="quadratic_congestion", c=np.array([0.5, 0.1]), A=np.zeros((2, 2)), state_dim=2)
    params = init_policy([2, 4, 2], seed=14)
    pset = PerturbationSet(p=2, epsilon=0.3, dim=2)
    s, a = sample(env, 6)
    traj = pga_run(params, s, a, env, pset, InnerLoopConfig(eta=0.3, steps=2))
    val = float(aajr_term(numpy_handle(params), s, traj))
    assert val == pytest.approx(aajr_penalty(params, s, traj), rel=0, abs=0)


def test_regularizer_config_validation():
    with pytest.raises(ConfigError):
        RegularizerConfig(lam=-0.1, gamma=1.0, gamma_adv=1.0)
    with pytest.raises(ConfigError):
        RegularizerConfig(lam=0.0, gamma=0.0, gamma_adv=1.0)
    with pytest.raises(ConfigError):
        RegularizerConfig(lam=0.0, gamma=1.0, gamma_adv=1.0, power_iters=0)

"""Certificates against dense finite-difference and SVD oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest

from aajrlab.environments import Environment, loss_hessian, sample
from aajrlab.errors import ConfigError
from aajrlab.inner import InnerLoopConfig, PerturbationSet, pga_run
from aajrlab.policy import forward, init_policy, scale_policy
from aajrlab.verification import (
    WitnessSpec,
    check_effective_smoothness,
    check_inclusion,
    check_pga_stability,
    class_witness,
    directional_curvature,
    estimate_C,
    inner_objective,
    random_orthonormal_basis,
    stable_step_size,
    subspace_directions,
    witness_matrix,
)

from conftest import linear_policy


def quad_env(c, A=None, state_dim=None, projector=None):
    c = np.asarray(c, dtype=float)
    m = len(c)
    return Environment(
        kind="quadratic_congestion",
        c=c,
        A=np.zeros((m, m)) if A is None else np.asarray(A, dtype=float),
        state_dim=m if state_dim is None else state_dim,
        projector=projector,
    )


def soft_env(c, beta=2.0):
    c = np.asarray(c, dtype=float)
    m = len(c)
    return Environment(kind="softplus_congestion", c=c, A=np.zeros((m, m)), state_dim=m, beta=beta)


def dense_fd_hessian(g, delta, h=1e-3):
    d = len(delta)
    H = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h
            ej[j] = h
            H[i, j] = (
                g(delta + ei + ej) - g(delta + ei - ej) - g(delta - ei + ej) + g(delta - ei - ej)
            ) / (4 * h * h)
    return 0.5 * (H + H.T)


# -- directional curvature ----------------------------------------------------


def test_curvature_identity_hessian():
    g = lambda delta: 0.5 * float(np.sum((delta - np.array([0.3, -0.4])) ** 2))
    v = np.array([0.6, 0.8])
    assert directional_curvature(g, np.zeros(2), v, 1e-4) == pytest.approx(1.0, abs=1e-6)


def test_curvature_linear_function_is_zero():
    g = lambda delta: float(delta @ np.array([2.0, -1.0])) + 3.0
    v = np.array([1.0, 0.0])
    assert directional_curvature(g, np.ones(2), v, 1e-4) == pytest.approx(0.0, abs=1e-6)


def test_curvature_matches_dense_fd_hessian():
    rng = np.random.default_rng(3)
    env = soft_env(rng.standard_normal(3))
    params = init_policy([3, 5, 3], seed=3)
    s, a = sample(env, 2)
    g = inner_objective(params, env, s, a)
    delta = rng.uniform(-0.2, 0.2, 3)
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    H = dense_fd_hessian(g, delta, h=1e-3)
    expected = float(v @ H @ v)
    got = directional_curvature(g, delta, v, 1e-3)
    assert got == pytest.approx(expected, abs=1e-4 * max(1.0, abs(expected)))


def test_curvature_second_order_convergence():
    # halving h shrinks the truncation error about fourfold on a smooth g
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 3))
    env = soft_env(rng.standard_normal(3))
    params = linear_policy(W)
    s = rng.uniform(-1, 1, 3)
    a = rng.uniform(-1, 1, 3)
    g = inner_objective(params, env, s, a)
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    delta = rng.uniform(-0.2, 0.2, 3)
    z = forward(params, s + delta)
    Jv = W @ v
    exact = float(Jv @ loss_hessian(env, z, a) @ Jv)
    err_h = abs(directional_curvature(g, delta, v, 0.1) - exact)
    err_h2 = abs(directional_curvature(g, delta, v, 0.05) - exact)
    assert 3.5 <= err_h / err_h2 <= 4.5


def test_curvature_rejects_non_unit_direction():
    g = lambda delta: float(np.sum(delta**2))
    with pytest.raises(ConfigError):
        directional_curvature(g, np.zeros(2), np.array([1.0, 1.0]), 1e-4)


# -- residual curvature estimate ----------------------------------------------


def test_estimate_c_linear_quadratic_vanishes():
    env = quad_env([0.7, -0.2])
    params = linear_policy(np.array([[1.2, 0.3], [-0.4, 0.9]]))
    pset = PerturbationSet(p=2, epsilon=0.5, dim=2)
    s, a = sample(env, 1)
    traj = pga_run(params, s, a, env, pset, InnerLoopConfig(eta=0.3, steps=4))
    assert estimate_C(params, env, s, a, traj) <= 1e-5


def test_estimate_c_stationary_trajectory_is_zero():
    # zero network output and zero target: loss gradient vanishes, nothing moves
    env = quad_env([0.0, 0.0])
    params = scale_policy(init_policy([2, 4, 2], seed=0), 0.0)
    pset = PerturbationSet(p=2, epsilon=0.5, dim=2)
    s, a = sample(env, 0)
    traj = pga_run(params, s, a, env, pset, InnerLoopConfig(eta=0.3, steps=3))
    assert all(v is None for v in traj.update_dirs)
    assert estimate_C(params, env, s, a, traj) == 0.0


def test_estimate_c_stable_across_grid_densities():
    env = quad_env([0.6, -0.8, 0.3])
    params = init_policy([3, 6, 3], seed=7)
    pset = PerturbationSet(p=2, epsilon=0.5, dim=3)
    s, a = sample(env, 7)
    traj = pga_run(params, s, a, env, pset, InnerLoopConfig(eta=0.3, steps=5))
    c5 = estimate_C(params, env, s, a, traj, grid=5)
    c9 = estimate_C(params, env, s, a, traj, grid=9)
    assert c9 > 0.0
    assert abs(c5 - c9) <= 0.1 * c9


# -- effective smoothness -----------------------------------------------------


def test_smoothness_tight_for_linear_quadratic():
    # curvature equals ||J v||^2 exactly; a large h keeps rounding negligible
    env = quad_env([1.0, -0.5])
    params = linear_policy(np.array([[1.5, 0.2], [-0.3, 0.8]]))
    pset = PerturbationSet(p=2, epsilon=0.8, dim=2)
    inner = InnerLoopConfig(eta=0.3, steps=4)
    s, a = sample(env, 3)
    report = check_effective_smoothness(params, env, (s, a), pset, inner, h=0.25)
    assert report.passed
    assert report.c_hat <= 1e-5
    for p in report.points:
        assert abs(p.curvature - p.amplification**2) <= 1e-9


def test_smoothness_vacuous_when_epsilon_zero():
    env = quad_env([1.0, 0.0])
    params = linear_policy(np.eye(2))
    pset = PerturbationSet(p=2, epsilon=0.0, dim=2)
    report = check_effective_smoothness(params, env, (np.zeros(2), np.zeros(2)), pset, InnerLoopConfig(eta=0.5, steps=3))
    assert report.passed
    assert report.gamma_adv_hat == 0.0 and report.l_eff_bound == 0.0 and not report.points


@pytest.mark.parametrize("make_env", [lambda: quad_env([0.6, -0.8, 0.3]), lambda: soft_env([0.2, -0.5, 0.7])])
def test_smoothness_holds_across_seeds(make_env):
    env = make_env()
    pset = PerturbationSet(p=2, epsilon=0.5, dim=3)
    inner = InnerLoopConfig(eta=0.3, steps=5)
    for seed in range(8):
        params = init_policy([3, 6, 3], seed=seed)
        report = check_effective_smoothness(params, env, sample(env, seed), pset, inner)
        assert report.passed, report.violations


# -- ascent stability ---------------------------------------------------------


def test_stability_hand_case_exact():
    env = quad_env([1.0, 0.0])
    params = linear_policy(np.eye(2))
    pset = PerturbationSet(p=math.inf, epsilon=2.0, dim=2)
    inner = InnerLoopConfig(eta=1.0, steps=1)
    pair = (np.zeros(2), np.zeros(2))
    traj = pga_run(params, pair[0], pair[1], env, pset, inner)
    assert traj.inner_values == (0.5, 2.0)
    assert np.array_equal(traj.deltas[1], np.array([-1.0, 0.0]))
    smooth = check_effective_smoothness(params, env, pair, pset, inner, h=0.25)
    report = check_pga_stability(params, env, pair, pset, inner, smoothness=smooth)
    assert report.premise_ok and report.passed
    # interior gain 1.5 against the promised eta/2 * ||grad||^2 = 0.5
    assert report.steps[0]["interior_slack"] == pytest.approx(1.0, abs=1e-12)


def test_stability_stationary_point():
    env = quad_env([0.0, 0.0])
    params = scale_policy(init_policy([2, 4, 2], seed=1), 0.0)
    pset = PerturbationSet(p=2, epsilon=0.5, dim=2)
    inner = InnerLoopConfig(eta=0.5, steps=3)
    pair = sample(env, 0)
    report = check_pga_stability(params, env, pair, pset, inner)
    assert report.passed
    for step in report.steps:
        assert step["gain"] == 0.0


@pytest.mark.parametrize("make_env", [lambda: quad_env([0.6, -0.8, 0.3]), lambda: soft_env([0.2, -0.5, 0.7])])
def test_stability_across_seeds_at_safe_step(make_env):
    env = make_env()
    pset = PerturbationSet(p=2, epsilon=0.5, dim=3)
    inner = InnerLoopConfig(eta=0.3, steps=5)
    for seed in range(8):
        params = init_policy([3, 6, 3], seed=seed)
        pair = sample(env, seed)
        cfg, smooth = stable_step_size(params, env, pair, pset, inner)
        report = check_pga_stability(params, env, pair, pset, cfg, smoothness=smooth)
        assert report.premise_ok
        assert report.passed, report.violations


def test_stability_oversized_step_recorded_not_asserted():
    # eta = 10 / L_eff violates the premise; the outcome is informational
    env = soft_env([0.2, -0.5, 0.7])
    pset = PerturbationSet(p=2, epsilon=0.5, dim=3)
    inner = InnerLoopConfig(eta=0.3, steps=5)
    outcomes = []
    for seed in range(8):
        params = init_policy([3, 6, 3], seed=seed)
        pair = sample(env, seed)
        smooth = check_effective_smoothness(params, env, pair, pset, inner)
        if smooth.l_eff_bound == 0.0:
            continue
        big = InnerLoopConfig(eta=10.0 / smooth.l_eff_bound, steps=5)
        report = check_pga_stability(params, env, pair, pset, big)
        assert not report.premise_ok
        outcomes.append(report.passed)
    assert outcomes  # at least one oversized run was actually exercised


# -- inclusion ----------------------------------------------------------------


def test_inclusion_small_policy_passes():
    env = quad_env([0.5, -0.5])
    params = linear_policy(0.5 * np.eye(2))
    report = check_inclusion(
        params, env, PerturbationSet(p=2, epsilon=0.4, dim=2), InnerLoopConfig(eta=0.3, steps=4), gamma=1.0, n_samples=5
    )
    assert report.status == "pass"
    assert report.sup_proxy <= 1.0
    assert not report.violations


def test_inclusion_premise_not_met_is_skipped():
    env = quad_env([0.5, -0.5])
    params = linear_policy(2.0 * np.eye(2))
    report = check_inclusion(
        params, env, PerturbationSet(p=2, epsilon=0.4, dim=2), InnerLoopConfig(eta=0.3, steps=3), gamma=1.0, n_samples=3
    )
    assert report.status == "premise_not_met"


def test_inclusion_on_trained_global_model_at_achieved_budget():
    from aajrlab.regularizers import RegularizerConfig
    from aajrlab.trainer import TrainConfig, measure_achieved_levels, train

    env = quad_env([0.5, -0.5])
    pset = PerturbationSet(p=2, epsilon=0.3, dim=2)
    inner = InnerLoopConfig(eta=0.3, steps=3)
    cfg = TrainConfig(
        mode="robust_global",
        outer_lr=0.05,
        outer_steps=40,
        batch_size=4,
        inner=inner,
        pset=pset,
        reg=RegularizerConfig(lam=5.0, gamma=0.3, gamma_adv=0.3),
        seed=0,
    )
    params, metrics = train(cfg, env, init_policy([2, 4, 2], seed=0))
    assert metrics.aborted_step is None
    _, achieved = measure_achieved_levels(params, env, pset, inner, cfg.reg, 10, seed=500)
    # small headroom: the check draws its own sample set
    report = check_inclusion(params, env, pset, inner, gamma=achieved * 1.05, n_samples=10, seed=500)
    assert report.status == "pass"
    assert not report.violations


def test_inclusion_random_nets_never_violate_when_premise_met():
    env = quad_env([0.4, 0.1, -0.3])
    pset = PerturbationSet(p=2, epsilon=0.4, dim=3)
    inner = InnerLoopConfig(eta=0.4, steps=4)
    for seed in range(6):
        params = scale_policy(init_policy([3, 5, 3], seed=seed), 0.5)
        report = check_inclusion(params, env, pset, inner, gamma=1.0, n_samples=5, seed=seed * 100)
        assert report.status in ("pass", "premise_not_met")
        if report.status == "pass":
            assert report.max_dir_amp <= report.gamma + 1e-9


# -- class witness ------------------------------------------------------------


def test_witness_axis_aligned_case():
    spec = WitnessSpec(gamma=1.0, offspace_gain=2.0, u_basis=np.array([[1.0], [0.0]]))
    assert np.array_equal(witness_matrix(spec), np.diag([1.0, 2.0]))
    report = class_witness(spec, [np.array([1.0, 0.0])])
    assert report.membership_ok
    assert report.sigma == pytest.approx(2.0, abs=1e-9)
    assert report.exclusion_ok
    assert report.e2e_u_in_subspace and report.e2e_directional_ok and report.e2e_global_violated
    assert report.passed


def test_witness_degenerate_equal_gains():
    spec = WitnessSpec(gamma=1.0, offspace_gain=1.0, u_basis=np.array([[1.0], [0.0]]))
    report = class_witness(spec, [np.array([1.0, 0.0])], run_e2e=False)
    assert report.membership_ok
    assert report.sigma == pytest.approx(1.0, abs=1e-12)
    assert not report.exclusion_ok  # strict expansion needs a strictly larger gain


def test_witness_random_subspace_matches_dense_svd():
    basis = random_orthonormal_basis(4, 2, seed=5)
    spec = WitnessSpec(gamma=0.5, offspace_gain=3.0, u_basis=basis)
    directions = subspace_directions(basis, 5, seed=9)
    report = class_witness(spec, directions, e2e_seed=5)
    J = witness_matrix(spec)
    sigma_svd = float(np.linalg.svd(J, compute_uv=False)[0])
    assert report.sigma == pytest.approx(sigma_svd, abs=1e-9)
    assert sigma_svd == pytest.approx(3.0, abs=1e-12)
    assert report.passed


def test_witness_validation_errors():
    bad_basis = np.array([[1.0], [1.0]])  # not orthonormal
    with pytest.raises(ConfigError):
        WitnessSpec(gamma=1.0, offspace_gain=2.0, u_basis=bad_basis)
    spec = WitnessSpec(gamma=1.0, offspace_gain=2.0, u_basis=np.array([[1.0], [0.0]]))
    with pytest.raises(ConfigError):
        class_witness(spec, [np.array([0.0, 1.0])], run_e2e=False)  # outside the subspace
    with pytest.raises(ConfigError):
        class_witness(spec, [np.array([2.0, 0.0])], run_e2e=False)  # too long

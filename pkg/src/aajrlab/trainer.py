"""Outer gradient descent on nominal and robust objectives, risk
evaluation, and the budget-matched price-of-robustness sweep.

Each outer step draws a seeded batch, runs the inner maximizer per sample
for robust modes, builds the chosen objective over the tape, and applies
one plain gradient-descent update. The worst-case perturbation and the
ascent directions are treated as constants during the outer update, which
is what makes the surrogate a stable first-order method.

The sweep trains nominal, globally-penalized, and directionally-penalized
models at matched budgets: the penalty weight for each penalized mode is
tuned by bisection until the achieved constraint level (max sampled
spectral norm for the global mode, max directional amplification for the
directional mode) lands within a tolerance of the shared budget gamma. The
reported gaps are trained-optimum estimates, not exact infima.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .environments import Environment, _draw, loss, loss_term
from .errors import ConfigError, NumericError
from .inner import InnerLoopConfig, PerturbationSet, pga_run
from .policy import (
    PolicyParams,
    apply_gradient_step,
    forward,
    gradient_norm,
    init_policy,
    numpy_handle,
    param_gradient,
)
from .regularizers import RegularizerConfig, aajr_term, global_penalty, global_term, spectral_norm

MODES = ("nominal", "robust_aajr", "robust_global", "robust_plain")

CSV_HEADER = "step,robust_loss,nominal_loss,aajr_penalty,global_penalty,max_dir_amp,mean_spectral,grad_norm"


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    outer_lr: float
    outer_steps: int
    batch_size: int
    inner: InnerLoopConfig
    pset: PerturbationSet
    reg: RegularizerConfig
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode '{self.mode}'")
        if not self.outer_lr > 0:
            raise ConfigError("outer_lr must be > 0")
        if int(self.outer_steps) < 0:
            raise ConfigError("outer_steps must be >= 0")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if int(self.seed) < 0:
            raise ConfigError("training seed must be >= 0")


@dataclass(frozen=True)
class StepRecord:
    step: int
    robust_loss: float
    nominal_loss: float
    aajr_penalty: float
    global_penalty: float
    mean_dir_amp: float
    max_dir_amp: float
    mean_spectral: float
    grad_norm: float


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)
    aborted_step: int | None = None

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.step},{float(r.robust_loss)!r},{float(r.nominal_loss)!r},"
                f"{float(r.aajr_penalty)!r},{float(r.global_penalty)!r},"
                f"{float(r.max_dir_amp)!r},{float(r.mean_spectral)!r},{float(r.grad_norm)!r}"
            )
        return "\n".join(lines) + "\n"


def _batch(env: Environment, cfg_seed: int, step: int, size: int):
    rng = np.random.default_rng([env.seed, cfg_seed, step])
    return [_draw(env, rng) for _ in range(size)]


def _objective_builder(env, batch, trajs, cfg: TrainConfig, params: PolicyParams):
    reg = cfg.reg
    robust = cfg.mode != "nominal"

    def build(handle):
        total = None
        for i, (s, a) in enumerate(batch):
            x = s + trajs[i].delta_star if robust else s
            term = loss_term(env, handle.forward(x), a)
            total = term if total is None else total + term
        obj = total * (1.0 / len(batch))
        if cfg.mode == "robust_aajr" and reg.lam != 0.0:
            pen = None
            for (s, _), traj in zip(batch, trajs):
                term = aajr_term(handle, s, traj, reg)
                pen = term if pen is None else pen + term
            obj = obj + reg.lam * (pen * (1.0 / len(batch)))
        elif cfg.mode == "robust_global" and reg.lam != 0.0:
            states = [s for s, _ in batch]
            obj = obj + reg.lam * global_term(handle, params, states, reg)
        return obj

    return build


def train(cfg: TrainConfig, env: Environment, params0: PolicyParams):
    """Run the outer loop; returns final parameters and per-step metrics.

    Deterministic given (cfg.seed, env.seed, params0). A non-finite loss or
    gradient aborts the run, with the offending step recorded in the
    metrics instead of raised.
    """
    if params0.in_dim != env.state_dim or params0.out_dim != env.action_dim:
        raise ConfigError(
            f"policy ({params0.in_dim} -> {params0.out_dim}) does not match environment "
            f"({env.state_dim} -> {env.action_dim})"
        )
    params = params0
    metrics = RunMetrics()
    robust = cfg.mode != "nominal"
    for step in range(cfg.outer_steps):
        batch = _batch(env, cfg.seed, step, cfg.batch_size)
        try:
            trajs = None
            if robust:
                trajs = [pga_run(params, s, a, env, cfg.pset, cfg.inner) for s, a in batch]
            build = _objective_builder(env, batch, trajs, cfg, params)
            value, grads = param_gradient(params, build)
            if not np.isfinite(value):
                raise NumericError(f"non-finite objective at outer step {step}")
            record = _step_record(step, env, params, batch, trajs, grads, cfg)
        except NumericError:
            metrics.aborted_step = step
            break
        metrics.records.append(record)
        params = apply_gradient_step(params, grads, cfg.outer_lr)
    return params, metrics


def _step_record(step, env, params, batch, trajs, grads, cfg: TrainConfig) -> StepRecord:
    nominal_vals = [loss(env, forward(params, s), a) for s, a in batch]
    nominal_loss = float(np.mean(nominal_vals))
    if trajs is None:
        robust_loss = nominal_loss
        aajr_val = 0.0
        amps: list[float] = []
    else:
        robust_loss = float(np.mean([t.inner_values[-1] for t in trajs]))
        handle = numpy_handle(params)
        aajr_vals = [float(aajr_term(handle, s, t, cfg.reg)) for (s, _), t in zip(batch, trajs)]
        aajr_val = float(np.mean(aajr_vals))
        amps = [amp for t in trajs for amp in t.dir_amps]
    states = [s for s, _ in batch]
    global_val = global_penalty(params, states, cfg.reg)
    spectrals = [spectral_norm(params, s, cfg.reg) for s in states]
    return StepRecord(
        step=step,
        robust_loss=robust_loss,
        nominal_loss=nominal_loss,
        aajr_penalty=aajr_val,
        global_penalty=float(global_val),
        mean_dir_amp=float(np.mean(amps)) if amps else 0.0,
        max_dir_amp=float(np.max(amps)) if amps else 0.0,
        mean_spectral=float(np.mean(spectrals)),
        grad_norm=gradient_norm(grads),
    )


def evaluate_nominal_risk(params: PolicyParams, env: Environment, n_samples: int, seed: int) -> float:
    """Monte-Carlo mean of L(pi(s), a) over seeded draws."""
    mean, _ = _nominal_risk_samples(params, env, n_samples, seed)
    return mean


def _nominal_risk_samples(params, env, n_samples, seed):
    if int(n_samples) < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng([env.seed, int(seed)])
    vals = []
    for _ in range(int(n_samples)):
        s, a = _draw(env, rng)
        vals.append(loss(env, forward(params, s), a))
    vals = np.asarray(vals)
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), se


def evaluate_robust_risk(
    params: PolicyParams,
    env: Environment,
    pset: PerturbationSet,
    inner: InnerLoopConfig,
    n_samples: int,
    seed: int,
) -> float:
    """Monte-Carlo mean of the inner objective at the final PGA iterate."""
    if int(n_samples) < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng([env.seed, int(seed)])
    vals = []
    for _ in range(int(n_samples)):
        s, a = _draw(env, rng)
        traj = pga_run(params, s, a, env, pset, inner)
        vals.append(traj.inner_values[-1])
    return float(np.mean(vals))


def measure_achieved_levels(
    params: PolicyParams,
    env: Environment,
    pset: PerturbationSet,
    inner: InnerLoopConfig,
    reg: RegularizerConfig,
    n_samples: int,
    seed: int,
):
    """Post-training constraint levels over fresh trajectories.

    Returns (max directional amplification over ascent steps, max spectral
    norm over every visited state s + delta_t).
    """
    rng = np.random.default_rng([env.seed, int(seed)])
    max_amp = 0.0
    max_spec = 0.0
    for _ in range(int(n_samples)):
        s, a = _draw(env, rng)
        traj = pga_run(params, s, a, env, pset, inner)
        if traj.dir_amps:
            max_amp = max(max_amp, max(traj.dir_amps))
        for delta in traj.deltas:
            max_spec = max(max_spec, spectral_norm(params, s + delta, reg))
    return max_amp, max_spec


@dataclass
class GapReport:
    """Trained-optimum estimates of the nominal-risk gaps at matched budgets."""

    gamma: float
    t_hat: float  # global-budget gap estimate
    t_hat_ad: float  # directional-budget gap estimate
    pooled_se: float
    per_seed: list[dict]
    aggregate: dict
    excluded: list[dict]

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "t_hat": self.t_hat,
            "t_hat_ad": self.t_hat_ad,
            "pooled_se": self.pooled_se,
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "excluded": self.excluded,
        }

    def dump(self, path) -> None:
        with open(path, "w") as fp:
            json.dump(self.to_json(), fp, indent=2)
            fp.write("\n")


def _achieved_level(mode: str, dir_amp: float, spec: float) -> float:
    return dir_amp if mode == "robust_aajr" else spec


def price_of_robustness(
    env: Environment,
    base_cfg: TrainConfig,
    seeds,
    policy_dims,
    activations=None,
    *,
    eval_samples: int = 200,
    eval_seed: int = 10_000,
    achieved_samples: int = 20,
    bisect_iters: int = 12,
    match_tol: float = 0.05,
    lambda_init: float = 1.0,
    max_doublings: int = 10,
) -> GapReport:
    """Train all three modes per seed with bisection-matched budgets."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigError("price_of_robustness needs at least 3 seeds")
    gamma = base_cfg.reg.gamma

    def run_once(mode: str, lam: float, seed: int):
        cfg = replace(base_cfg, mode=mode, seed=seed, reg=replace(base_cfg.reg, lam=lam))
        params0 = init_policy(policy_dims, activations, seed=seed)
        params, metrics = train(cfg, env, params0)
        if metrics.aborted_step is not None:
            return None
        risk, se = _nominal_risk_samples(params, env, eval_samples, eval_seed)
        amp, spec = measure_achieved_levels(
            params, env, base_cfg.pset, base_cfg.inner, base_cfg.reg, achieved_samples, eval_seed
        )
        return {
            "mode": mode,
            "seed": seed,
            "lambda": lam,
            "nominal_risk": risk,
            "nominal_risk_se": se,
            "achieved_dir_amp": amp,
            "achieved_spectral": spec,
        }

    def match_budget(mode: str, seed: int):
        """Bisect the penalty weight until the achieved level is near gamma."""
        lo_band, hi_band = (1.0 - match_tol) * gamma, (1.0 + match_tol) * gamma
        result = run_once(mode, 0.0, seed)
        if result is None:
            return None
        if _achieved_level(mode, result["achieved_dir_amp"], result["achieved_spectral"]) <= hi_band:
            return result  # budget not binding (or already matched) at lambda = 0
        lo_lam = 0.0
        hi_lam = lambda_init
        hi_result = run_once(mode, hi_lam, seed)
        doublings = 0
        while hi_result is not None and doublings < max_doublings:
            level = _achieved_level(mode, hi_result["achieved_dir_amp"], hi_result["achieved_spectral"])
            if level <= hi_band:
                break
            lo_lam = hi_lam
            hi_lam *= 2.0
            hi_result = run_once(mode, hi_lam, seed)
            doublings += 1
        if hi_result is None:
            return None
        best = hi_result
        best_err = abs(
            _achieved_level(mode, best["achieved_dir_amp"], best["achieved_spectral"]) - gamma
        )
        for _ in range(bisect_iters):
            level = _achieved_level(mode, best["achieved_dir_amp"], best["achieved_spectral"])
            if lo_band <= level <= hi_band:
                return best
            mid = 0.5 * (lo_lam + hi_lam)
            mid_result = run_once(mode, mid, seed)
            if mid_result is None:
                return best
            mid_level = _achieved_level(
                mode, mid_result["achieved_dir_amp"], mid_result["achieved_spectral"]
            )
            if mid_level > hi_band:
                lo_lam = mid
            else:
                hi_lam = mid
            err = abs(mid_level - gamma)
            if err < best_err:
                best, best_err = mid_result, err
        return best

    per_seed: list[dict] = []
    excluded: list[dict] = []
    for seed in seeds:
        entry: dict = {"seed": seed}
        nominal = run_once("nominal", 0.0, seed)
        if nominal is None:
            excluded.append({"seed": seed, "mode": "nominal", "reason": "aborted"})
            continue
        entry["nominal"] = nominal
        ok = True
        for mode in ("robust_global", "robust_aajr"):
            matched = match_budget(mode, seed)
            if matched is None:
                excluded.append({"seed": seed, "mode": mode, "reason": "aborted"})
                ok = False
                break
            entry[mode] = matched
        if ok:
            per_seed.append(entry)
    if not per_seed:
        raise NumericError("every sweep run aborted; no gap estimate available")

    best_nominal = min(per_seed, key=lambda e: e["nominal"]["nominal_risk"])["nominal"]
    best_global = min(per_seed, key=lambda e: e["robust_global"]["nominal_risk"])["robust_global"]
    best_aajr = min(per_seed, key=lambda e: e["robust_aajr"]["nominal_risk"])["robust_aajr"]
    t_hat = best_global["nominal_risk"] - best_nominal["nominal_risk"]
    t_hat_ad = best_aajr["nominal_risk"] - best_nominal["nominal_risk"]
    pooled_se = float(np.sqrt(best_global["nominal_risk_se"] ** 2 + best_aajr["nominal_risk_se"] ** 2))
    aggregate = {
        "best_nominal": best_nominal,
        "best_global": best_global,
        "best_aajr": best_aajr,
        "aajr_max_dir_amp": best_aajr["achieved_dir_amp"],
        "global_max_spectral": best_global["achieved_spectral"],
    }
    return GapReport(
        gamma=gamma,
        t_hat=float(t_hat),
        t_hat_ad=float(t_hat_ad),
        pooled_se=pooled_se,
        per_seed=per_seed,
        aggregate=aggregate,
        excluded=excluded,
    )

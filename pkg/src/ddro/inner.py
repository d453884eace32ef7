"""Adversarial fine-tuning of the diffusion model under a score-matching budget.

The inner problem  max_theta E_{P_theta}[f(w, x)]  s.t.  J(theta, S0) <= eps
is relaxed with a multiplier mu >= 0.  theta ascends a policy-gradient or
clipped-ratio (PPO) surrogate of  E[f] - mu J ; mu follows projected dual
ascent  mu <- max(0, mu + eta (J - eps)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    DSMDraws,
    NoiseSchedule,
    ScoreModel,
    Trajectory,
    draw_dsm,
    dsm_graph,
    dsm_value,
    reverse_sample,
    traj_log_prob,
    traj_log_prob_graph,
)
from .tensor import OptimizerState, Tensor, adam_step, clip, exp, grad, mean, minimum

LOG_RATIO_CLAMP = 30.0
REWARD_MODES = ("raw", "centered", "standardized")


class DivergenceError(FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class DualState:
    mu: float = 1.0
    eta: float = 0.01
    eps: float = 0.015

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.eta <= 0 or self.eps <= 0:
            raise ValueError("eta and eps must be positive")


def dual_update(dual: DualState, J_current: float) -> DualState:
    return replace(dual, mu=max(0.0, dual.mu + dual.eta * (J_current - dual.eps)))


@dataclass
class InnerConfig:
    K: int = 10
    kappa: float = 0.4
    tuned_steps: int = 15
    surrogate: str = "ppo"
    updates: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    reward: str = "raw"
    reset: str = "continuous"
    dsm_repeats: int = 4
    n_eval: int = 128

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.tuned_steps < 1:
            raise ValueError("tuned_steps must be >= 1")
        if self.surrogate not in ("ppo", "pg"):
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.reward not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward!r}")
        if self.reset not in ("continuous", "reset"):
            raise ValueError(f"unknown reset mode {self.reset!r}")
        if self.K < 0:
            raise ValueError("K must be >= 0")


@dataclass
class InnerTrace:
    J: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    expected_f: list = field(default_factory=list)

    def __len__(self):
        return len(self.J)


def ppo_ratio(model: ScoreModel, reference: ScoreModel, traj: Trajectory, sched: NoiseSchedule, step_set: Sequence[int] | None = None) -> np.ndarray:
    """Trajectory likelihood ratio P_theta / P_ref per chain, from log space."""
    if model.dim != reference.dim:
        raise ValueError("model and reference differ in dimensionality")
    steps = traj.steps if step_set is None else step_set
    if model is reference:
        return np.ones(len(traj))
    log_r = traj_log_prob(model, traj, sched, steps) - traj_log_prob(reference, traj, sched, steps)
    if (np.abs(log_r) > LOG_RATIO_CLAMP).any():
        worst = float(np.max(np.abs(log_r)))
        if not np.isfinite(worst):
            raise OverflowError("log ratio is not finite")
    return np.exp(np.clip(log_r, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def ppo_surrogate_terms(ratio, f, kappa: float) -> np.ndarray:
    """min(r f, clip(r, 1-kappa, 1+kappa) f) elementwise (numpy)."""
    ratio, f = np.asarray(ratio, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return np.minimum(ratio * f, np.clip(ratio, 1 - kappa, 1 + kappa) * f)


def _rewards(f_values, reward: str = "raw") -> np.ndarray:
    """Per-chain rewards as a column: raw f, f minus its batch mean, or
    the batch z-score of f (scale-free, as in PPO advantage normalisation)."""
    f = np.asarray(f_values, dtype=np.float64).reshape(-1, 1)
    if reward == "raw":
        return f
    f = f - f.mean()
    if reward == "standardized":
        sd = f.std()
        f = f / sd if sd > 0 else f
    return f


def ppo_objective_graph(params, model, ref_logp, traj, f_values, kappa, mu, S0, draws, sched, reward="raw") -> Tensor:
    if len(traj) == 0:
        raise ValueError("empty trajectory batch")
    f = _rewards(f_values, reward)
    lp = traj_log_prob_graph(params, model, traj, sched, traj.steps)
    log_r = clip(lp - np.asarray(ref_logp).reshape(-1, 1), -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    r = exp(log_r)
    surrogate = mean(minimum(r * f, clip(r, 1 - kappa, 1 + kappa) * f))
    return surrogate - dsm_graph(params, model, S0, draws, sched) * mu


def pg_objective_graph(params, model, traj, f_values, mu, S0, draws, sched, reward="raw") -> Tensor:
    if len(traj) == 0:
        raise ValueError("empty trajectory batch")
    f = _rewards(f_values, reward)
    lp = traj_log_prob_graph(params, model, traj, sched, traj.steps)
    return mean(lp * f) - dsm_graph(params, model, S0, draws, sched) * mu


def ppo_objective(model, reference, traj, f_values, cfg: InnerConfig, dual: DualState, S0, draws: DSMDraws, sched) -> float:
    """Value of the clipped surrogate minus mu * J (numpy evaluation)."""
    if len(traj) == 0:
        raise ValueError("empty trajectory batch")
    r = ppo_ratio(model, reference, traj, sched)
    f = _rewards(f_values, cfg.reward).ravel()
    return float(np.mean(ppo_surrogate_terms(r, f, cfg.kappa)) - dual.mu * dsm_value(model, S0, draws, sched))


def pg_objective(model, traj, f_values, dual: DualState, S0, draws: DSMDraws, sched, reward: str = "raw") -> float:
    if len(traj) == 0:
        raise ValueError("empty trajectory batch")
    lp = traj_log_prob(model, traj, sched)
    f = _rewards(f_values, reward).ravel()
    return float(np.mean(lp * f) - dual.mu * dsm_value(model, S0, draws, sched))


@dataclass
class InnerResult:
    iterates: list
    trace: InnerTrace
    dual: DualState
    model: ScoreModel
    opt_state: OptimizerState | None = None


def inner_max_run(
    f: Callable[[np.ndarray], np.ndarray],
    model_init: ScoreModel,
    reference: ScoreModel,
    S0: np.ndarray,
    sched: NoiseSchedule,
    cfg: InnerConfig,
    dual_init: DualState,
    seed: int,
    ref_traj: Trajectory | None = None,
    draws: DSMDraws | None = None,
    opt_state: OptimizerState | None = None,
    J_offset: float = 0.0,
) -> InnerResult:
    """K rounds of (surrogate ascent on theta, dual step on mu).

    ``f`` maps generated (n, d) vectors to per-sample losses and is treated
    as a fixed reward.  ``ref_traj`` are chains drawn from ``reference``
    (PPO only); ``draws`` fixes the J(theta, S0) noise for the whole run.
    ``J_offset`` is subtracted from J before it meets the budget.
    """
    rng = np.random.default_rng(seed)
    steps = list(range(1, cfg.tuned_steps + 1))
    S0 = np.asarray(S0, dtype=np.float64)
    if draws is None:
        draws = draw_dsm(S0.shape[0], S0.shape[1], steps, rng, cfg.dsm_repeats)
    model = model_init
    if model.base is None or model.tuned_steps != cfg.tuned_steps:
        model = model_init.tuned_copy(cfg.tuned_steps)
    params = [p.copy() for p in model.params]
    state = opt_state or OptimizerState.for_params(params, lr=cfg.lr)
    dual = dual_init
    trace = InnerTrace()
    iterates = []

    if cfg.surrogate == "ppo":
        if ref_traj is None:
            _, ref_traj = reverse_sample(reference, sched, cfg.batch_size * 2, int(rng.integers(2**31)), True, steps)
        ref_traj = Trajectory(ref_traj.states, tuple(steps))
        ref_logp = traj_log_prob(reference, ref_traj, sched, steps)
        ref_f = f(ref_traj.x0)
    eval_seed = int(rng.integers(2**31))

    for k in range(cfg.K):
        for _ in range(cfg.updates):
            ps = [Tensor(p, requires_grad=True) for p in params]
            cur = model.with_params(params)
            if cfg.surrogate == "ppo":
                idx = rng.choice(len(ref_traj), size=min(cfg.batch_size, len(ref_traj)), replace=False)
                obj = ppo_objective_graph(
                    ps, cur, ref_logp[idx], ref_traj.select(idx), ref_f[idx], cfg.kappa, dual.mu, S0, draws, sched, cfg.reward
                )
            else:
                _, tr = reverse_sample(cur, sched, cfg.batch_size, int(rng.integers(2**31)), True, steps)
                obj = pg_objective_graph(ps, cur, tr, f(tr.x0), dual.mu, S0, draws, sched, cfg.reward)
            if not np.isfinite(obj.data).all():
                raise DivergenceError(f"non-finite objective at inner iteration {k + 1}", trace)
            g = grad(obj, ps)
            params, state = adam_step(params, [-gi for gi in g], state)
        cur = model.with_params(params)
        J = dsm_value(cur, S0, draws, sched) - J_offset
        if not np.isfinite(J):
            raise DivergenceError(f"non-finite J at inner iteration {k + 1}", trace)
        trace.J.append(J)
        trace.mu.append(dual.mu)
        dual = dual_update(dual, J)
        x_eval = reverse_sample(cur, sched, cfg.n_eval, eval_seed)
        trace.expected_f.append(float(np.mean(f(x_eval))))
        iterates.append(cur)
    return InnerResult(iterates, trace, dual, model.with_params(params), state)

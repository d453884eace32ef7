"""DDPM mechanics: schedules, forward noising, denoising score matching,
ancestral sampling and trajectory log-likelihoods.

Steps are 1-based (``t = 1..T``); schedule arrays are indexed ``t - 1``.
The network predicts the injected noise; the score is recovered as
``-eps_hat / sqrt(1 - alpha_bar_t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import (
    Tensor,
    adam_step,
    concatenate,
    grad,
    init_params,
    matmul,
    mean,
    OptimizerState,
    square,
    sum_,
    tanh,
)

SIGMA_MODES = ("ddpm", "scaled", "constant")


class SamplingError(FloatingPointError):
    """Reverse chain produced a non-finite state."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    sigmas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-d array")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        if sigmas.shape != betas.shape or (sigmas < 0).any():
            raise ValueError("sigmas must be non-negative and match betas")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return self.betas.size

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"step out of range 1..{self.T}")

    def mean_coefs(self, t):
        """(1/sqrt(alpha_t), beta_t/sqrt(1-alpha_bar_t)) for the reverse mean."""
        i = np.asarray(t) - 1
        return 1.0 / np.sqrt(self.alphas[i]), self.betas[i] / np.sqrt(1.0 - self.alpha_bars[i])

    def with_sigmas(self, sigmas) -> "NoiseSchedule":
        return replace(self, sigmas=np.asarray(sigmas, dtype=np.float64))


def build_schedule(
    T: int,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    sigma: float = 0.3,
    sigma_mode: str = "ddpm",
    tuned_steps: int | None = None,
) -> NoiseSchedule:
    """Linear beta schedule.

    ``sigma_mode`` sets the reverse-step standard deviations:

    * ``"ddpm"``: ``sqrt(beta_t)`` at every step (``sigma`` unused);
    * ``"constant"``: ``sigma`` on the last ``tuned_steps`` steps,
      ``sqrt(beta_t)`` elsewhere;
    * ``"scaled"``: ``sigma * sqrt(beta_t)`` at every step.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    if sigma_mode == "ddpm":
        sigmas = np.sqrt(betas)
    elif sigma_mode == "scaled":
        sigmas = sigma * np.sqrt(betas)
    elif sigma_mode == "constant":
        k = T if tuned_steps is None else tuned_steps
        sigmas = np.sqrt(betas)
        sigmas[:k] = sigma
    else:
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    return NoiseSchedule(betas, sigmas)


def forward_perturb(x0, t, xi, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) xi; ``t`` may be per-row."""
    sched.check_step(t)
    ab = sched.alpha_bars[np.asarray(t) - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if np.ndim(ab) == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(xi, dtype=np.float64)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of the integer step, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class ScoreModel:
    """Noise predictor eps_hat(x, t): two tanh hidden layers on [x, emb(t)].

    A model with a ``base`` only owns the steps ``t <= tuned_steps``; later
    steps are delegated to ``base`` (used to fine-tune the tail of the chain
    while the rest stays at the reference).
    """

    params: list
    dim: int
    emb_dim: int = 16
    hidden: int = 64
    base: "ScoreModel | None" = None
    tuned_steps: int | None = None

    @classmethod
    def create(cls, dim: int, seed: int, emb_dim: int = 16, hidden: int = 64) -> "ScoreModel":
        params = init_params([dim + emb_dim, hidden, hidden, dim], seed)
        # small output layer: start close to eps_hat = 0
        params[4] = params[4] * 0.1
        return cls(params, dim, emb_dim, hidden)

    def tuned_copy(self, tuned_steps: int, params=None) -> "ScoreModel":
        root = self if self.base is None else self.base
        src = self.params if params is None else params
        return ScoreModel([p.copy() for p in src], self.dim, self.emb_dim, self.hidden, root, tuned_steps)

    def with_params(self, params) -> "ScoreModel":
        return replace(self, params=list(params))

    def owns(self, t: int) -> bool:
        return self.base is None or t <= self.tuned_steps

    def params_for(self, t: int) -> list:
        return self.params if self.owns(t) else self.base.params_for(t)

    def check_steps(self, steps) -> None:
        if self.base is not None and max(steps) > self.tuned_steps:
            raise ValueError(
                f"steps up to {max(steps)} requested from a model tuned on 1..{self.tuned_steps}"
            )

    # numpy path, no graph
    def eps(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        out = np.empty_like(x)
        for step in np.unique(t):
            rows = t == step
            W1, b1, W2, b2, W3, b3 = self.params_for(int(step))
            e = time_embedding([step], self.emb_dim)
            h = np.tanh(x[rows] @ W1[: self.dim] + (e @ W1[self.dim :] + b1))
            h = np.tanh(h @ W2 + b2)
            out[rows] = h @ W3 + b3
        return out

    def score(self, x, t, sched: NoiseSchedule) -> np.ndarray:
        ab = sched.alpha_bars[np.asarray(t) - 1]
        return -self.eps(x, t) / np.sqrt(1.0 - np.reshape(ab, (-1, 1)) if np.ndim(ab) else 1.0 - ab)

    def reverse_mean(self, x, t, sched: NoiseSchedule) -> np.ndarray:
        c1, c2 = sched.mean_coefs(t)
        c1, c2 = np.reshape(c1, (-1, 1)), np.reshape(c2, (-1, 1))
        return c1 * (np.atleast_2d(x) - c2 * self.eps(x, t))


def eps_graph(params: Sequence[Tensor], x: Tensor, t: np.ndarray, emb_dim: int) -> Tensor:
    """Differentiable eps_hat for rows ``x`` at steps ``t`` using ``params``."""
    emb = Tensor(time_embedding(t, emb_dim))
    W1, b1, W2, b2, W3, b3 = params
    h = tanh(matmul(concatenate([x, emb], axis=1), W1) + b1)
    h = tanh(matmul(h, W2) + b2)
    return matmul(h, W3) + b3


# ---------------------------------------------------------------------------
# denoising score matching


@dataclass(frozen=True)
class DSMDraws:
    """Fixed (row, step, noise) draws so J can be re-evaluated with common
    random numbers."""

    rows: np.ndarray
    t: np.ndarray
    xi: np.ndarray


def draw_dsm(n: int, dim: int, step_set: Sequence[int], rng: np.random.Generator, repeats: int = 1) -> DSMDraws:
    steps = np.asarray(sorted(set(int(s) for s in step_set)))
    if steps.size == 0:
        raise ValueError("empty step set")
    rows = np.tile(np.arange(n), repeats)
    t = rng.choice(steps, size=rows.size)
    xi = rng.standard_normal((rows.size, dim))
    return DSMDraws(rows, t, xi)


def dsm_graph(params: Sequence[Tensor], model: ScoreModel, x0: np.ndarray, draws: DSMDraws, sched: NoiseSchedule) -> Tensor:
    """Mean over draws of ||xi - eps_hat(x_t, t)||^2, differentiable in ``params``."""
    xt = forward_perturb(x0[draws.rows], draws.t, draws.xi, sched)
    pred = eps_graph(params, Tensor(xt), draws.t, model.emb_dim)
    return mean(sum_(square(pred - draws.xi), axis=1))


def dsm_value(model: ScoreModel, x0: np.ndarray, draws: DSMDraws, sched: NoiseSchedule) -> float:
    model.check_steps(draws.t)
    xt = forward_perturb(x0[draws.rows], draws.t, draws.xi, sched)
    resid = draws.xi - model.eps(xt, draws.t)
    return float(np.mean(np.sum(resid * resid, axis=1)))


def dsm_loss(model: ScoreModel, batch, sched: NoiseSchedule, step_set: Sequence[int] | None = None, seed: int = 0, repeats: int = 1) -> float:
    """Empirical denoising score-matching loss with fresh seeded draws."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    step_set = range(1, sched.T + 1) if step_set is None else step_set
    if len(list(step_set)) == 0:
        raise ValueError("empty step set")
    sched.check_step(list(step_set))
    draws = draw_dsm(batch.shape[0], batch.shape[1], step_set, np.random.default_rng(seed), repeats)
    return dsm_value(model, batch, draws, sched)


def train_score_model(
    model: ScoreModel,
    data: np.ndarray,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    step_set: Sequence[int] | None = None,
    checkpoints: Sequence[int] = (),
) -> tuple[ScoreModel, list]:
    """Adam on the DSM loss.  Returns the trained model and the models saved
    at the requested ``checkpoints`` (iteration counts)."""
    rng = np.random.default_rng(seed)
    data = np.asarray(data, dtype=np.float64)
    step_set = list(range(1, sched.T + 1)) if step_set is None else list(step_set)
    params = [p.copy() for p in model.params]
    state = OptimizerState.for_params(params, lr=lr)
    saved = []
    wanted = set(checkpoints)
    if 0 in wanted:
        saved.append(model.with_params(params))
    for it in range(1, steps + 1):
        idx = rng.choice(data.shape[0], size=min(batch_size, data.shape[0]), replace=False)
        draws = draw_dsm(idx.size, data.shape[1], step_set, rng)
        ps = [Tensor(p, requires_grad=True) for p in params]
        loss = dsm_graph(ps, model, data[idx], draws, sched)
        params, state = adam_step(params, grad(loss, ps), state)
        if it in wanted:
            saved.append(model.with_params(params))
    return model.with_params(params), saved


# ---------------------------------------------------------------------------
# sampling and trajectory likelihoods


@dataclass(frozen=True)
class Trajectory:
    """A batch of reverse-chain realisations.

    ``states[t]`` holds x_t for every chain, t = 0..T, shape (T+1, n, d).
    """

    states: np.ndarray
    steps: tuple

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    def __len__(self):
        return self.states.shape[1]

    def select(self, idx) -> "Trajectory":
        return Trajectory(self.states[:, idx], self.steps)


def _chain_layers(model: ScoreModel, sched: NoiseSchedule):
    """Per-step network parameters with the time embedding folded into the
    first-layer bias."""
    T, d = sched.T, model.dim
    roots = []
    for t in range(1, T + 1):
        W1, b1, W2, b2, W3, b3 = model.params_for(t)
        e = time_embedding([t], model.emb_dim)[0]
        roots.append((W1[:d], e @ W1[d:] + b1, W2, b2, W3, b3))
    return roots


def reverse_sample(
    model: ScoreModel,
    sched: NoiseSchedule,
    n: int,
    seed: int,
    keep_trajectories: bool = False,
    step_set: Sequence[int] | None = None,
    backend: str | None = None,
):
    """Ancestral sampling x_{t-1} = mu_theta(x_t, t) + sigma_t z_t from x_T ~ N(0, I).

    Returns the (n, d) array of x_0, plus a ``Trajectory`` when
    ``keep_trajectories`` is set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    T, d = sched.T, model.dim
    xT = rng.standard_normal((n, d))
    z = rng.standard_normal((T, n, d))
    c1, c2 = sched.mean_coefs(np.arange(1, T + 1))
    if isinstance(model, ScoreModel):
        states = kernels.reverse_chain(xT, z, c1, c2, sched.sigmas, _chain_layers(model, sched), backend=backend)
    else:
        # any object with eps(x, t), e.g. a closed-form score
        states = np.empty((T + 1, n, d))
        states[T] = xT
        for t in range(T, 0, -1):
            eps = model.eps(states[t], np.full(n, t))
            states[t - 1] = c1[t - 1] * (states[t] - c2[t - 1] * eps) + sched.sigmas[t - 1] * z[t - 1]
    bad = ~np.isfinite(states).reshape(T + 1, -1).all(axis=1)
    if bad.any():
        t_bad = int(np.max(np.nonzero(bad)[0]))
        raise SamplingError(f"non-finite state at step {t_bad}")
    samples = states[0].copy()
    if not keep_trajectories:
        return samples
    steps = tuple(range(1, T + 1)) if step_set is None else tuple(sorted(step_set))
    return samples, Trajectory(states, steps)


def _logprob_terms_np(model: ScoreModel, traj: Trajectory, sched: NoiseSchedule, steps) -> np.ndarray:
    out = []
    for t in steps:
        sig = sched.sigmas[t - 1]
        mu = model.reverse_mean(traj.states[t], np.full(len(traj), t), sched)
        r = traj.states[t - 1] - mu
        out.append(-np.sum(r * r, axis=1) / (2.0 * sig * sig))
    return np.array(out)


def _check_logprob(traj, sched, steps):
    if not set(steps) <= set(traj.steps):
        raise ValueError("trajectory does not cover the requested steps")
    sig = sched.sigmas[np.asarray(steps) - 1]
    if (sig <= 0).any():
        raise ValueError("zero sampling std in step set: density undefined")


def traj_log_prob(model: ScoreModel, traj: Trajectory, sched: NoiseSchedule, step_set: Sequence[int] | None = None) -> np.ndarray:
    """theta-dependent part of ln P(x_{0:T}) per chain:
    -sum_t ||x_{t-1} - mu_theta(x_t, t)||^2 / (2 sigma_t^2), compensated sum."""
    steps = list(traj.steps if step_set is None else sorted(step_set))
    _check_logprob(traj, sched, steps)
    model.check_steps(steps)
    terms = _logprob_terms_np(model, traj, sched, steps)
    return np.array([math.fsum(col) for col in terms.T])


def traj_log_prob_graph(params: Sequence[Tensor], model: ScoreModel, traj: Trajectory, sched: NoiseSchedule, steps: Sequence[int]) -> Tensor:
    """Differentiable per-chain log-probability, shape (n, 1).

    All (step, chain) rows go through the network in one batch and are folded
    back per chain with a constant 0/1 aggregation matrix.
    """
    steps = list(steps)
    _check_logprob(traj, sched, steps)
    n = len(traj)
    t_rows = np.repeat(steps, n)
    x_t = np.concatenate([traj.states[t] for t in steps])
    x_prev = np.concatenate([traj.states[t - 1] for t in steps])
    c1, c2 = sched.mean_coefs(t_rows)
    w = -1.0 / (2.0 * sched.sigmas[t_rows - 1] ** 2)
    eps = eps_graph(params, Tensor(x_t), t_rows, model.emb_dim)
    mu = (x_t - eps * c2[:, None]) * c1[:, None]
    sq = sum_(square(mu - x_prev), axis=1, keepdims=True) * w[:, None]
    fold = np.tile(np.eye(n), (1, len(steps)))
    return matmul(Tensor(fold), sq)

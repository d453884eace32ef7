"""Comparison trainers: ERM (ML), diffusion-augmented ERM (DML),
Wasserstein DRO by projected adversarial perturbation and KL DRO by
exponential tilting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, softmax

from .data import SequenceSet
from .diffusion import NoiseSchedule, ScoreModel
from .predictor import DecisionModel, predict_graph
from .tensor import Tensor, grad, square, sum_
from .trainer import OuterConfig, RunResult, Standardizer, _streams, fine_tune, grad_norm, sample_adversarial_dataset

BASELINES = ("ml", "dml", "wdro", "kldro")


@dataclass(frozen=True)
class RobustLossReport:
    value: float
    alpha: float | None = None
    weights: np.ndarray | None = None


def _tilted_value(losses: np.ndarray, eps: float, alpha: float) -> float:
    # alpha * ln mean exp(l / alpha) + alpha * eps, log-sum-exp stabilised
    return alpha * (logsumexp(losses / alpha) - math.log(losses.size)) + alpha * eps


def kl_dro_robust_loss(losses, eps: float) -> RobustLossReport:
    """sup { E_Q[l] : KL(Q || uniform) <= eps } via its one-dimensional dual.

    The dual min over alpha > 0 is searched on ln alpha; the alpha -> 0 limit
    (all mass on the largest losses, feasible once eps >= -ln of their
    empirical mass) is compared in closed form.
    """
    l = np.asarray(losses, dtype=np.float64).ravel()
    if l.size == 0 or not np.isfinite(l).all():
        raise ValueError("losses must be non-empty and finite")
    if eps <= 0:
        raise ValueError("eps must be positive")
    top = l.max()
    spread = top - l.min()
    if spread == 0:
        return RobustLossReport(float(top), None, np.full(l.size, 1.0 / l.size))
    lo, hi = math.log(1e-4 * spread), math.log(1e4 * spread)
    opt = minimize_scalar(lambda s: _tilted_value(l, eps, math.exp(s)), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    alpha = math.exp(opt.x)
    value = _tilted_value(l, eps, alpha)
    at_max = l == top
    if eps >= -math.log(at_max.mean()) and top <= value:
        return RobustLossReport(float(top), 0.0, at_max / at_max.sum())
    return RobustLossReport(float(value), alpha, softmax(l / alpha))


def ball_ascent(x, loss_fn: Callable[[Tensor], Tensor], budget: float, steps: int = 10, step_size: float | None = None) -> np.ndarray:
    """Per-row projected gradient ascent of ``loss_fn`` (per-row losses,
    shape (n,)) over ||delta_i||_2 <= budget.  Returns the best point seen
    for each row, so no row's loss ever decreases."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if budget == 0 or steps == 0:
        return x.copy()
    step_size = budget / 4 if step_size is None else step_size
    delta = np.zeros_like(x)
    best = x.copy()
    best_loss = loss_fn(Tensor(x)).data.copy()
    for _ in range(steps):
        xt = Tensor(x + delta, requires_grad=True)
        (g,) = grad(sum_(loss_fn(xt)), [xt])
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        delta = delta + step_size * np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        scale = np.minimum(1.0, budget / np.maximum(np.linalg.norm(delta, axis=1, keepdims=True), 1e-300))
        delta = delta * scale
        cand = x + delta
        cand_loss = loss_fn(Tensor(cand)).data
        better = cand_loss > best_loss
        best[better] = cand[better]
        best_loss = np.where(better, cand_loss, best_loss)
    return best


def wdro_perturb(batch: SequenceSet, w: DecisionModel, budget: float, steps: int = 10, step_size: float | None = None) -> SequenceSet:
    """Worst-case windows within an l2 ball of radius ``budget`` per sample."""
    ps = [Tensor(p) for p in w.params]
    hor = batch.horizons

    def per_sample(win: Tensor) -> Tensor:
        return sum_(square(predict_graph(ps, w, win) - hor), axis=1) * (1.0 / w.L_out)

    return SequenceSet(ball_ascent(batch.windows, per_sample, budget, steps, step_size), hor.copy())


def train_baseline(
    kind: str,
    w0: DecisionModel,
    S0: SequenceSet,
    outer: OuterConfig,
    seed: int,
    reference: ScoreModel | None = None,
    codec: Standardizer | None = None,
    sched: NoiseSchedule | None = None,
    wdro_budget: float = 0.3,
    wdro_steps: int = 5,
    kl_eps: float = 4.0,
) -> RunResult:
    """Fine-tune ``w0`` for ``outer.iterations`` rounds of ``outer.epochs``.

    * ``ml``: on S0;
    * ``dml``: on the fixed reference-generated set z0 (same seed derivation
      and shuffling stream as the D-DRO loop, which it matches when the
      diffusion model is frozen);
    * ``wdro``: on S0 with each minibatch's windows adversarially perturbed;
    * ``kldro``: on S0 with each minibatch reweighted by the tilted weights.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline kind {kind!r}")
    rng_data, _, rng_sel = _streams(seed)
    hook = None
    data = S0
    if kind == "dml":
        if reference is None or sched is None:
            raise ValueError("dml needs a reference diffusion model and schedule")
        codec = codec or Standardizer.identity(reference.dim)
        z_seed = int(rng_data.integers(2**31))
        data = sample_adversarial_dataset(reference, sched, outer.n or len(S0), z_seed, w0.L_in, codec)
    elif kind == "wdro":
        def hook(w, win, hor):
            return wdro_perturb(SequenceSet(win, hor), w, wdro_budget, wdro_steps).windows, hor, None
    elif kind == "kldro":
        def hook(w, win, hor):
            return win, hor, kl_dro_robust_loss(w.sample_losses(win, hor), kl_eps).weights

    res = RunResult(kind, [], [], [], budget=kl_eps if kind == "kldro" else wdro_budget if kind == "wdro" else 0.0, w_init=w0)
    w, opt = w0, None
    for _ in range(outer.iterations):
        res.losses.append(float(np.mean(w.sample_losses(data.windows, data.horizons))))
        res.grad_norms.append(grad_norm(w, data))
        w, opt = fine_tune(w, data, outer, rng_data, opt, hook)
        res.w_iterates.append(w)
    if res.w_iterates and outer.select == "uniform":
        res.selected = int(rng_sel.integers(len(res.w_iterates)))
    return res

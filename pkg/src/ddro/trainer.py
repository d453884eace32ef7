"""Outer loop: adversarial dataset generation and decision-variable updates.

Gradient descent with a max-oracle: each outer iteration runs the inner
maximisation, draws one diffusion iterate uniformly, generates a dataset
from it and takes descent steps on the predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SequenceSet
from .diffusion import (
    NoiseSchedule,
    ScoreModel,
    draw_dsm,
    dsm_value,
    reverse_sample,
    train_score_model,
)
from .inner import DualState, InnerConfig, inner_max_run
from .predictor import DecisionModel, loss_graph, split_vectors
from .tensor import OptimizerState, Tensor, adam_step, grad


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine codec between data vectors and the diffusion space."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors, floor: float = 1e-6) -> "Standardizer":
        v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return cls(v.mean(axis=0), np.maximum(v.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def encode(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) / self.std

    def decode(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class OuterConfig:
    """``batch_size=None`` with ``epochs=1`` and ``optimizer="gd"`` is the
    single full-batch step of the plain algorithm."""

    iterations: int = 15
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int | None = 64
    optimizer: str = "adam"
    n: int | None = None
    select: str = "last"

    def __post_init__(self):
        if self.iterations < 0 or self.epochs < 0:
            raise ValueError("iterations and epochs must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.select not in ("last", "uniform"):
            raise ValueError(f"unknown selection rule {self.select!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class RunResult:
    kind: str
    w_iterates: list
    losses: list
    grad_norms: list
    inner_traces: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    budget: float = 0.0
    selected: int | None = None
    error: str | None = None
    w_init: DecisionModel | None = None

    @property
    def w(self) -> DecisionModel:
        """The returned decision: last iterate, or the uniformly drawn one."""
        if not self.w_iterates:
            return self.w_init
        return self.w_iterates[-1 if self.selected is None else self.selected]


# ---------------------------------------------------------------------------
# predictor updates


def _mean_loss_grad(w: DecisionModel, windows, horizons, weights=None):
    ps = [Tensor(p, requires_grad=True) for p in w.params]
    loss = loss_graph(ps, w, windows, horizons, weights)
    g = grad(loss, ps)
    for i, gi in enumerate(g):
        if not np.isfinite(gi).all():
            raise FloatingPointError(f"non-finite gradient in predictor parameter {i} (shape {gi.shape})")
    return float(loss.data), g


def outer_step(w: DecisionModel, S: SequenceSet, lr: float) -> DecisionModel:
    """w - lr * grad of the mean loss over ``S`` (one full-batch step)."""
    if len(S) == 0:
        raise ValueError("empty dataset")
    _, g = _mean_loss_grad(w, S.windows, S.horizons)
    return w.with_params([p - lr * gi for p, gi in zip(w.params, g)])


def grad_norm(w: DecisionModel, S: SequenceSet) -> float:
    _, g = _mean_loss_grad(w, S.windows, S.horizons)
    return float(np.sqrt(sum(np.sum(gi * gi) for gi in g)))


BatchHook = Callable[[DecisionModel, np.ndarray, np.ndarray], tuple]


def fine_tune(
    w: DecisionModel,
    S: SequenceSet,
    cfg: OuterConfig,
    rng: np.random.Generator,
    state: OptimizerState | None = None,
    hook: BatchHook | None = None,
):
    """``cfg.epochs`` shuffled passes over ``S``.

    ``hook(w, windows, horizons) -> (windows, horizons, weights)`` may rewrite
    each minibatch (adversarial perturbation, reweighting).
    """
    if len(S) == 0:
        raise ValueError("empty dataset")
    params = [p.copy() for p in w.params]
    if cfg.optimizer == "adam" and state is None:
        state = OptimizerState.for_params(params, lr=cfg.lr)
    bs = len(S) if cfg.batch_size is None else cfg.batch_size
    for _ in range(cfg.epochs):
        order = rng.permutation(len(S))
        for start in range(0, len(S), bs):
            idx = order[start : start + bs]
            cur = w.with_params(params)
            win, hor, wts = S.windows[idx], S.horizons[idx], None
            if hook is not None:
                win, hor, wts = hook(cur, win, hor)
            _, g = _mean_loss_grad(cur, win, hor, wts)
            if cfg.optimizer == "gd":
                params = [p - cfg.lr * gi for p, gi in zip(params, g)]
            else:
                params, state = adam_step(params, g, state)
    return w.with_params(params), state


def pretrain_predictor(
    train: SequenceSet,
    hidden=(32,),
    arch: str = "mlp",
    epochs: int = 200,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> DecisionModel:
    w = DecisionModel.create(train.windows.shape[1], train.horizons.shape[1], hidden, seed, arch)
    cfg = OuterConfig(lr=lr, epochs=epochs, batch_size=batch_size)
    w, _ = fine_tune(w, train, cfg, np.random.default_rng([seed, 7]))
    return w


def pretrain_diffusion(
    train: SequenceSet,
    sched: NoiseSchedule,
    steps: int = 3000,
    seed: int = 0,
    hidden: int = 64,
    emb_dim: int = 16,
    lr: float = 2e-3,
    batch_size: int = 64,
):
    """Reference score model fitted to standardized (window, horizon) vectors."""
    codec = Standardizer.fit(train.vectors)
    z = codec.encode(train.vectors)
    model = ScoreModel.create(z.shape[1], seed, emb_dim, hidden)
    model, _ = train_score_model(model, z, sched, steps, seed, batch_size, lr)
    return model, codec


# ---------------------------------------------------------------------------
# the D-DRO loop


def _streams(seed: int):
    """Independent generators: data/shuffling, inner loop, final selection."""
    return tuple(np.random.default_rng([seed, k]) for k in range(3))


def sample_adversarial_dataset(model, sched: NoiseSchedule, n: int, seed: int, L_in: int, codec: Standardizer | None = None) -> SequenceSet:
    """n reverse-chain draws split into (window, horizon) samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = reverse_sample(model, sched, n, seed)
    v = z if codec is None else codec.decode(z)
    return SequenceSet(*split_vectors(v, L_in))


def _loss_reward(w: DecisionModel, codec: Standardizer):
    def f(z):
        win, hor = split_vectors(codec.decode(z), w.L_in)
        return w.sample_losses(win, hor)

    return f


def ddro_train(
    w0: DecisionModel,
    reference: ScoreModel,
    codec: Standardizer,
    S0: SequenceSet,
    sched: NoiseSchedule,
    outer: OuterConfig,
    inner: InnerConfig,
    dual: DualState,
    seed: int,
    relative_budget: bool = True,
) -> RunResult:
    """Alternate inner maximisation and predictor updates for ``outer.iterations`` rounds.

    Every S_j is generated with the same sampler seed as the reference set
    z0, so S_j differs from z0 only through the fine-tuned diffusion
    parameters.  With ``inner.K == 0`` the diffusion model stays at the
    reference and the run reproduces the DML baseline step for step.
    With ``relative_budget`` the constraint is on J(theta) - J(reference).
    """
    rng_data, rng_inner, rng_sel = _streams(seed)
    n = outer.n or len(S0)
    steps = list(range(1, inner.tuned_steps + 1))
    z_seed = int(rng_data.integers(2**31))
    S0z = codec.encode(S0.vectors)
    _, ref_traj = reverse_sample(reference, sched, n, z_seed, True, steps)
    draws = draw_dsm(S0z.shape[0], S0z.shape[1], steps, rng_inner, inner.dsm_repeats)
    J_ref = dsm_value(reference, S0z, draws, sched) if relative_budget else 0.0

    model = reference.tuned_copy(inner.tuned_steps)
    cur_dual, inner_opt, opt = dual, None, None
    w = w0
    res = RunResult("ddro", [], [], [], budget=dual.eps, w_init=w0)
    try:
        for j in range(outer.iterations):
            theta = model
            if inner.K > 0:
                r = inner_max_run(
                    _loss_reward(w, codec), model, reference, S0z, sched, inner, cur_dual,
                    int(rng_inner.integers(2**31)), ref_traj, draws, inner_opt, J_ref,
                )
                theta = r.iterates[int(rng_inner.integers(len(r.iterates)))]
                res.inner_traces.append(r.trace)
                if inner.reset == "continuous":
                    model, cur_dual, inner_opt = r.model, r.dual, r.opt_state
            res.thetas.append(theta)
            S_j = sample_adversarial_dataset(theta, sched, n, z_seed, w.L_in, codec)
            res.losses.append(float(np.mean(w.sample_losses(S_j.windows, S_j.horizons))))
            res.grad_norms.append(grad_norm(w, S_j))
            w, opt = fine_tune(w, S_j, outer, rng_data, opt)
            res.w_iterates.append(w)
    except (FloatingPointError, ValueError) as exc:
        res.error = f"outer iteration {len(res.w_iterates) + 1}: {exc}"
        raise RunFailure(str(exc), res) from exc
    if res.w_iterates and outer.select == "uniform":
        res.selected = int(rng_sel.integers(len(res.w_iterates)))
    return res


class RunFailure(RuntimeError):
    """A training stage failed; ``partial`` holds the traces so far."""

    def __init__(self, msg, partial: RunResult):
        super().__init__(msg)
        self.partial = partial

"""End-to-end experiment pipeline: data, pretraining, training, evaluation.

Every random draw derives from the run seed through ``numpy`` seed
sequences, so a (config, seed) pair fixes the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .baselines import train_baseline
from .config import ExperimentConfig
from .data import MinMaxScaler, SequenceSet, apply_noise, read_csv, synth_generate, windowize
from .diffusion import NoiseSchedule, ScoreModel, build_schedule, train_score_model
from .inner import DualState, InnerConfig
from .metrics import AnalyticGaussianModel, lemma1_probe, mse_eval
from .predictor import DecisionModel
from .trainer import OuterConfig, RunResult, Standardizer, ddro_train, pretrain_diffusion, pretrain_predictor

# sub-stream tags, one per independent use of the run seed
_TRAIN, _TEST, _NOISE, _PRETRAIN, _DIFFUSION, _METHOD = range(6)


def derive(seed: int, *tags: int) -> int:
    """A 31-bit seed for the sub-stream ``tags`` of run ``seed``."""
    return int(np.random.default_rng([seed, *tags]).integers(2**31))


@dataclass
class Benchmark:
    train: SequenceSet
    clean: SequenceSet
    tests: dict
    scaler: MinMaxScaler


def build_benchmark(cfg: ExperimentConfig, seed: int | None = None) -> Benchmark:
    """Training split plus one shifted test set per configured noise kind.

    Both splits are min-max scaled with the training split's range; the
    shifted sets perturb the clean test windows.
    """
    seed = cfg.seed if seed is None else seed
    L_in, L_out = cfg.predictor.L_in, cfg.predictor.L_out
    if cfg.data.source == "csv":
        train_s, test_s = read_csv(cfg.data.train_csv), read_csv(cfg.data.test_csv)
    else:
        train_s = synth_generate(cfg.synth_spec(), derive(seed, _TRAIN))
        test_s = synth_generate(cfg.synth_spec(cfg.data.test_length), derive(seed, _TEST))
    scaler = MinMaxScaler.fit(train_s.values)
    train = windowize(scaler.series(train_s), L_in, L_out)
    clean = windowize(scaler.series(test_s), L_in, L_out)
    tests = {kind: apply_noise(clean, cfg.noise.spec(kind), derive(seed, _NOISE, i)) for i, kind in enumerate(cfg.noise.kinds)}
    return Benchmark(train, clean, tests, scaler)


def level_sets(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> list:
    """(kind, level, dataset) for every configured noise-level sweep point."""
    out = []
    for i, kind in enumerate(cfg.noise.kinds):
        for j, lv in enumerate(cfg.noise.levels(kind)):
            spec = cfg.noise.spec(kind).at_level(lv)
            out.append((kind, float(lv), apply_noise(bench.clean, spec, derive(seed, _NOISE, i, j + 1))))
    return out


@dataclass
class Pretrained:
    w0: DecisionModel
    reference: ScoreModel | None
    codec: Standardizer | None
    sched: NoiseSchedule


def schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return build_schedule(d.T, d.beta_min, d.beta_max, d.sigma, d.sigma_mode, d.tuned_steps)


def pretrain(cfg: ExperimentConfig, bench: Benchmark, seed: int | None = None, diffusion: bool = True) -> Pretrained:
    """The shared starting point: ERM predictor and reference diffusion model."""
    seed = cfg.seed if seed is None else seed
    p, d = cfg.predictor, cfg.diffusion
    sched = schedule(cfg)
    w0 = pretrain_predictor(bench.train, p.hidden, p.arch, p.pretrain_epochs, p.pretrain_lr, cfg.outer.batch_size, derive(seed, _PRETRAIN))
    ref = codec = None
    if diffusion:
        ref, codec = pretrain_diffusion(bench.train, sched, d.train_steps, derive(seed, _DIFFUSION), d.hidden, d.emb_dim, d.lr, cfg.outer.batch_size)
    return Pretrained(w0, ref, codec, sched)


def outer_config(cfg: ExperimentConfig) -> OuterConfig:
    o = cfg.outer
    return OuterConfig(o.iterations, o.lr, o.epochs, o.batch_size, o.optimizer, o.n, o.select)


def inner_config(cfg: ExperimentConfig) -> InnerConfig:
    i = cfg.inner
    return InnerConfig(
        K=i.K, kappa=i.kappa, tuned_steps=cfg.diffusion.tuned_steps, surrogate=i.surrogate, updates=i.updates, batch_size=i.batch_size,
        lr=i.lr, reward=i.reward, reset=i.reset, dsm_repeats=i.dsm_repeats, n_eval=i.n_eval,
    )


def run_method(method: str, cfg: ExperimentConfig, bench: Benchmark, pre: Pretrained, seed: int | None = None, eps: float | None = None) -> RunResult:
    """Train one method from the shared pretrained state.

    All methods see the same method seed, so ML/DML/D-DRO share their
    shuffling stream and D-DRO with K = 0 reproduces DML exactly.
    """
    seed = cfg.seed if seed is None else seed
    ms = derive(seed, _METHOD)
    outer = outer_config(cfg)
    if method == "ddro":
        dual = DualState(cfg.inner.mu, cfg.inner.eta, cfg.inner.eps if eps is None else eps)
        return ddro_train(pre.w0, pre.reference, pre.codec, bench.train, pre.sched, outer, inner_config(cfg), dual, ms, cfg.inner.relative_budget)
    b = cfg.baselines
    return train_baseline(method, pre.w0, bench.train, outer, ms, pre.reference, pre.codec, pre.sched, b.wdro_budget, b.wdro_steps, b.kl_eps)


def evaluate(w: DecisionModel, bench: Benchmark) -> dict:
    """MSE on the clean split, each shifted set, and their mean over shifted sets."""
    out = {"clean": mse_eval(w, bench.clean)}
    shifted = {k: mse_eval(w, d) for k, d in bench.tests.items()}
    out.update(shifted)
    if shifted:
        out["mean"] = float(np.mean(list(shifted.values())))
    return out


def needs_diffusion(methods) -> bool:
    return any(m in ("dml", "ddro") for m in methods)


def with_overrides(cfg: ExperimentConfig, **blocks) -> ExperimentConfig:
    """``with_overrides(cfg, inner={"K": 0})`` replaces fields inside blocks."""
    return replace(cfg, **{k: replace(getattr(cfg, k), **v) for k, v in blocks.items()})


# ---------------------------------------------------------------------------
# verification probes

GAUSSIAN_TOY = dict(T=50, beta_min=1e-3, beta_max=0.2, m0=0.5, v0=0.04)
LEMMA1_CHECKPOINTS = (0, 50, 200, 600, 1500)


def lemma1_training_probe(seed: int, checkpoints=LEMMA1_CHECKPOINTS, hidden: int = 32, lr: float = 3e-3, n_data: int = 2000):
    """Train a 1-d score model on the Gaussian toy and probe its checkpoints.

    The probe data, DSM draws and sampler noise are shared by all
    checkpoints (see ``lemma1_probe``); the training batches use their own
    stream.
    """
    g = GAUSSIAN_TOY
    sched = build_schedule(g["T"], g["beta_min"], g["beta_max"])
    rng = np.random.default_rng([seed, 0])
    data = rng.normal(g["m0"], np.sqrt(g["v0"]), size=(n_data, 1))
    model = ScoreModel.create(1, derive(seed, 1), hidden=hidden)
    _, saved = train_score_model(model, data, sched, max(checkpoints), derive(seed, 2), lr=lr, checkpoints=checkpoints)
    return lemma1_probe(saved, sched, g["m0"], g["v0"], n_data=n_data, seed=derive(seed, 3))


def analytic_lemma1_probe(seed: int = 0, m0: float | None = None, v0: float | None = None):
    """The probe on a model wired to the closed-form Gaussian score."""
    g = GAUSSIAN_TOY
    m0 = g["m0"] if m0 is None else m0
    v0 = g["v0"] if v0 is None else v0
    sched = build_schedule(g["T"], g["beta_min"], g["beta_max"])
    return lemma1_probe(AnalyticGaussianModel(m0, v0, sched), sched, m0, v0, seed=seed)

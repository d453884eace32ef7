import math

import numpy as np
import pytest

from ddro.baselines import train_baseline
from ddro.data import SequenceSet
from ddro.diffusion import ScoreModel, build_schedule
from ddro.inner import DualState, InnerConfig
from ddro.predictor import DecisionModel
from ddro.trainer import (
    OuterConfig,
    RunFailure,
    Standardizer,
    ddro_train,
    fine_tune,
    grad_norm,
    outer_step,
    sample_adversarial_dataset,
)


def linear(a, b):
    w = DecisionModel.create(1, 1, (), 0)
    return w.with_params([np.array([[a]]), np.array([b])])


def test_outer_step_hand_value():
    # f = (a x + b - y)^2 on {(1, 0), (2, 1)} with a=1, b=0: residuals 1 and 1
    # d/da = mean(2 r x) = 3, d/db = mean(2 r) = 2
    S = SequenceSet(np.array([[1.0], [2.0]]), np.array([[0.0], [1.0]]))
    w = outer_step(linear(1.0, 0.0), S, 0.2)
    assert math.isclose(w.params[0][0, 0], 1.0 - 0.6, rel_tol=1e-14)
    assert math.isclose(w.params[1][0], -0.4, rel_tol=1e-14)
    assert math.isclose(grad_norm(linear(1.0, 0.0), S), math.sqrt(13), rel_tol=1e-14)
    # a single sample whose loss is already zero does not move
    z = outer_step(linear(1.0, 0.0), SequenceSet(np.array([[1.4]]), np.array([[1.4]])), 0.5)
    assert z.params[0][0, 0] == 1.0 and z.params[1][0] == 0.0


def test_outer_step_matches_per_sample_average():
    rng = np.random.default_rng(0)
    S = SequenceSet(rng.normal(size=(9, 4)), rng.normal(size=(9, 2)))
    w = DecisionModel.create(4, 2, (5,), 1)
    full = outer_step(w, S, 0.1)
    singles = [outer_step(w, SequenceSet(S.windows[i : i + 1], S.horizons[i : i + 1]), 0.1) for i in range(9)]
    avg = np.mean([s.flat() for s in singles], axis=0)
    assert np.allclose(full.flat(), avg, rtol=0, atol=1e-13)
    with pytest.raises(ValueError):
        outer_step(w, SequenceSet(np.zeros((0, 4)), np.zeros((0, 2))), 0.1)


def test_fine_tune_full_batch_gd_is_outer_step():
    rng = np.random.default_rng(1)
    S = SequenceSet(rng.normal(size=(7, 3)), rng.normal(size=(7, 1)))
    w = DecisionModel.create(3, 1, (4,), 2)
    cfg = OuterConfig(epochs=1, batch_size=None, optimizer="gd", lr=0.05)
    a, _ = fine_tune(w, S, cfg, np.random.default_rng(0))
    assert np.allclose(a.flat(), outer_step(w, S, 0.05).flat(), rtol=0, atol=1e-14)


def test_non_finite_values_raise():
    S = SequenceSet(np.array([[1e200]]), np.array([[0.0]]))
    with pytest.raises(FloatingPointError, match="non-finite"):
        outer_step(linear(1e200, 0.0), S, 0.1)


def test_standardizer_roundtrip():
    rng = np.random.default_rng(2)
    v = rng.normal(3.0, 2.0, size=(50, 4))
    c = Standardizer.fit(v)
    assert np.allclose(c.decode(c.encode(v)), v)
    assert np.allclose(c.encode(v).mean(axis=0), 0, atol=1e-12)
    assert np.array_equal(Standardizer.identity(4).encode(v), v)
    assert (Standardizer.fit(np.ones((3, 2))).std == 1e-6).all()


def test_outer_config_validation():
    for kw in [dict(optimizer="sgd"), dict(select="best"), dict(iterations=-1), dict(batch_size=0), dict(lr=-1.0)]:
        with pytest.raises(ValueError):
            OuterConfig(**kw)


def _setup(seed=0, L_in=3, L_out=1, n=24):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, L_in + L_out))
    S0 = SequenceSet(x[:, :L_in], x[:, L_in:])
    sched = build_schedule(8, 0.01, 0.3)
    ref = ScoreModel.create(L_in + L_out, seed, emb_dim=4, hidden=8)
    codec = Standardizer.fit(S0.vectors)
    w0 = DecisionModel.create(L_in, L_out, (6,), seed)
    return S0, sched, ref, codec, w0


def test_ddro_zero_inner_iterations_is_dml():
    S0, sched, ref, codec, w0 = _setup()
    outer = OuterConfig(iterations=3, epochs=1, batch_size=8, lr=1e-2)
    d = ddro_train(w0, ref, codec, S0, sched, outer, InnerConfig(K=0, tuned_steps=4), DualState(), seed=4)
    b = train_baseline("dml", w0, S0, outer, 4, ref, codec, sched)
    assert d.losses == b.losses and d.grad_norms == b.grad_norms
    assert np.array_equal(d.w.flat(), b.w.flat())


def test_ddro_traces_determinism_and_recomputation():
    S0, sched, ref, codec, w0 = _setup(1)
    outer = OuterConfig(iterations=2, epochs=1, batch_size=8, lr=1e-2)
    inner = InnerConfig(K=2, tuned_steps=4, batch_size=8, n_eval=8, dsm_repeats=1)
    a = ddro_train(w0, ref, codec, S0, sched, outer, inner, DualState(1.0, 0.5, 0.05), seed=2)
    b = ddro_train(w0, ref, codec, S0, sched, outer, inner, DualState(1.0, 0.5, 0.05), seed=2)
    assert len(a.w_iterates) == len(a.losses) == len(a.thetas) == len(a.inner_traces) == 2
    assert a.losses == b.losses and np.array_equal(a.w.flat(), b.w.flat())
    # the recorded loss at round j is the mean loss of w_{j-1} on S_j
    z_seed = int(np.random.default_rng([2, 0]).integers(2**31))
    prev = [w0] + a.w_iterates[:-1]
    for j, theta in enumerate(a.thetas):
        S_j = sample_adversarial_dataset(theta, sched, len(S0), z_seed, 3, codec)
        assert math.isclose(a.losses[j], float(np.mean(prev[j].sample_losses(S_j.windows, S_j.horizons))), rel_tol=1e-12)


def test_ddro_zero_outer_iterations():
    S0, sched, ref, codec, w0 = _setup()
    r = ddro_train(w0, ref, codec, S0, sched, OuterConfig(iterations=0), InnerConfig(K=2, tuned_steps=4), DualState(), 0)
    assert r.w is w0 and r.losses == []


def test_uniform_selection_is_seeded():
    S0, sched, ref, codec, w0 = _setup()
    outer = OuterConfig(iterations=4, epochs=1, batch_size=8, select="uniform")
    r = ddro_train(w0, ref, codec, S0, sched, outer, InnerConfig(K=0, tuned_steps=4), DualState(), 3)
    assert r.selected == int(np.random.default_rng([3, 2]).integers(4))
    assert r.w is r.w_iterates[r.selected]


def test_run_failure_keeps_partial_traces():
    S0, sched, ref, codec, w0 = _setup()
    bad = w0.with_params([p * 1e200 for p in w0.params])
    with pytest.raises(RunFailure) as info, np.errstate(over="ignore"):
        ddro_train(bad, ref, codec, S0, sched, OuterConfig(iterations=2), InnerConfig(K=0, tuned_steps=4), DualState(), 0)
    assert info.value.partial.error.startswith("outer iteration 1")

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddro import kernels
from ddro.data import (
    MinMaxScaler,
    NoiseSpec,
    SequenceSet,
    Series,
    SynthSpec,
    apply_noise,
    cutout_count,
    perlin_field,
    read_csv,
    synth_generate,
    windowize,
    write_csv,
)
from ddro.metrics import wasserstein1


def test_noiseless_sinusoid():
    spec = SynthSpec(length=50, periods=(10.0,), amplitudes=(2.0,), noise=0.0)
    s = synth_generate(spec, 0)
    assert np.allclose(s.values, 2.0 * np.sin(2 * np.pi * np.arange(50) / 10.0), atol=1e-15)


def test_synth_deterministic_and_invalid():
    assert np.array_equal(synth_generate(SynthSpec(length=100), 3).values, synth_generate(SynthSpec(length=100), 3).values)
    for bad in [SynthSpec(length=1), SynthSpec(ar=1.0), SynthSpec(noise=-1), SynthSpec(periods=(1.0,), amplitudes=())]:
        with pytest.raises(ValueError):
            synth_generate(bad, 0)
    with pytest.raises(ValueError):
        synth_generate(SynthSpec(length=20), 0, min_length=25)


def test_synth_innovations_have_target_std():
    s = synth_generate(SynthSpec(length=50_000, amplitudes=(0.0, 0.0), noise=0.3, ar=0.6), 1)
    assert abs(s.values.std() - 0.3) < 0.02


def test_trend_shift_moves_marginals():
    a = windowize(synth_generate(SynthSpec(length=300), 0), 8, 1)
    b = windowize(synth_generate(SynthSpec(length=300, trend=0.01), 0), 8, 1)
    assert wasserstein1(a.windows.ravel(), b.windows.ravel()) > 0


def test_windowize_counts_and_roundtrip():
    s = Series(np.arange(100.0))
    assert len(windowize(s, 24, 1)) == 76
    assert len(windowize(s, 3, 2, stride=100)) == 1
    ds = windowize(s, 5, 2)
    rebuilt = np.concatenate([ds.vectors[:, 0], ds.vectors[-1, 1:]])
    assert np.array_equal(rebuilt, s.values)
    with pytest.raises(ValueError):
        windowize(Series(np.ones(5)), 4, 2)
    with pytest.raises(ValueError):
        windowize(s, 0, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 80), st.integers(1, 6), st.integers(1, 4), st.integers(1, 9))
def test_windowize_count_formula(n, L_in, L_out, stride):
    if n < L_in + L_out:
        return
    assert len(windowize(np.arange(float(n)), L_in, L_out, stride)) == (n - L_in - L_out) // stride + 1


def test_csv_roundtrip_and_errors(tmp_path):
    s = synth_generate(SynthSpec(length=30), 2)
    p = tmp_path / "s.csv"
    write_csv(s, p)
    assert np.array_equal(read_csv(p).values, s.values)
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,value\n0,1.0\n1,abc\n")
    with pytest.raises(ValueError, match=":3:"):
        read_csv(bad)
    bad.write_text("time,val\n0,1\n")
    with pytest.raises(ValueError, match="header"):
        read_csv(bad)


def test_series_invariants():
    with pytest.raises(ValueError):
        Series(np.array([]))
    with pytest.raises(ValueError):
        Series(np.array([1.0, np.inf]))


def test_minmax_scaler():
    sc = MinMaxScaler.fit([2.0, 4.0, 6.0])
    assert sc.transform([2.0, 6.0]).tolist() == [0.0, 1.0]
    assert np.allclose(sc.inverse(sc.transform([3.3])), [3.3])


def _dataset(L_in=10, n=40, seed=0):
    return windowize(synth_generate(SynthSpec(length=n + L_in), seed), L_in, 1)


def test_gaussian_zero_is_identity():
    d = _dataset()
    out = apply_noise(d, NoiseSpec("gaussian", sigma=0.0), 1)
    assert np.array_equal(out.windows, d.windows) and np.array_equal(out.horizons, d.horizons)


def test_cutout_exact_count():
    d = _dataset(L_in=10)
    d = SequenceSet(d.windows * 0.5, d.horizons)  # keep originals away from 1
    out = apply_noise(d, NoiseSpec("cutout", ratio=0.3, fill=1.0), 5)
    assert ((out.windows == 1.0).sum(axis=1) == 3).all()
    assert cutout_count(0.3, 10) == 3 and cutout_count(0.31, 10) == 4 and cutout_count(0.0, 10) == 0


def test_perlin_bounds_and_smoothness():
    d = _dataset(L_in=24)
    out = apply_noise(d, NoiseSpec("perlin", octaves=8, amplitude=1.0), 2)
    field = out.windows - d.windows
    assert field.min() >= -1 - 1e-12 and field.max() <= 1 + 1e-12
    assert np.isclose(field.max(), 1.0) and np.isclose(field.min(), -1.0)
    # octave k contributes slope <= C 2^-k * 2^k / L per unit step; sum over 8 octaves
    assert np.abs(np.diff(field, axis=1)).max() <= 8 * 4.0 * 1.0 / 24 * 2


def test_perlin_backends_agree():
    rng = np.random.default_rng(0)
    g = rng.uniform(-1, 1, (4, 5, 18))
    a = kernels.perlin_octaves(np.arange(24.0), g, 24.0, backend="python")
    if kernels.BACKEND == "compiled":
        b = kernels.perlin_octaves(np.arange(24.0), g, 24.0, backend="compiled")
        assert np.allclose(a, b, rtol=0, atol=1e-13)
    assert perlin_field(3, 24, 8, 0.0, rng).max() == 0.0


@pytest.mark.parametrize("spec", [NoiseSpec("gaussian", sigma=0.2), NoiseSpec("perlin"), NoiseSpec("cutout")])
def test_noise_preserves_horizons_order_and_is_seeded(spec):
    d = _dataset()
    a, b = apply_noise(d, spec, 9), apply_noise(d, spec, 9)
    assert np.array_equal(a.windows, b.windows)
    assert np.array_equal(a.horizons, d.horizons) and len(a) == len(d)


def test_noise_spec_validation():
    for bad in [NoiseSpec("cutout", ratio=1.5), NoiseSpec("gaussian", sigma=-0.1), NoiseSpec("perlin", amplitude=-1), NoiseSpec("salt")]:
        with pytest.raises(ValueError):
            bad.validate()
    assert NoiseSpec("cutout").at_level(0.5).ratio == 0.5

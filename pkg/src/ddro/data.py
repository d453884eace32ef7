"""Synthetic series, CSV ingestion, windowing and OOD perturbations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Series:
    values: np.ndarray
    interval: str = "hourly"
    source: str = "synthetic"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("series must be a non-empty 1-d array")
        if not np.isfinite(v).all():
            raise ValueError("series contains non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class SynthSpec:
    """Seasonal + trend + AR(1) innovations, with an optional level shift.

    ``shift_at`` (fraction of the length) starts a regime where the level
    moves by ``shift_level`` and seasonal amplitudes scale by ``shift_amp``.
    """

    length: int = 2000
    periods: tuple = (24.0, 168.0)
    amplitudes: tuple = (1.0, 0.4)
    trend: float = 0.0
    level: float = 0.0
    noise: float = 0.2
    ar: float = 0.5
    shift_at: float | None = None
    shift_level: float = 0.0
    shift_amp: float = 1.0

    def validate(self, min_length: int = 2) -> None:
        if self.length < min_length:
            raise ValueError(f"length {self.length} shorter than {min_length}")
        if len(self.periods) != len(self.amplitudes):
            raise ValueError("periods and amplitudes differ in length")
        if any(p <= 0 for p in self.periods):
            raise ValueError("periods must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not -1 < self.ar < 1:
            raise ValueError("ar coefficient must lie in (-1, 1)")
        if self.shift_at is not None and not 0 <= self.shift_at <= 1:
            raise ValueError("shift_at must be a fraction in [0, 1]")


def synth_generate(spec: SynthSpec, seed: int, min_length: int = 2) -> Series:
    spec.validate(min_length)
    rng = np.random.default_rng(seed)
    n = spec.length
    t = np.arange(n, dtype=np.float64)
    amp_scale = np.ones(n)
    level = np.full(n, spec.level)
    if spec.shift_at is not None:
        on = t >= spec.shift_at * n
        amp_scale[on] = spec.shift_amp
        level[on] += spec.shift_level
    x = level + spec.trend * t
    for P, A in zip(spec.periods, spec.amplitudes):
        x = x + amp_scale * A * np.sin(2 * np.pi * t / P)
    if spec.noise > 0:
        e = rng.normal(0.0, spec.noise, n)
        # stationary AR(1) innovations with marginal std = noise
        e[0] /= math.sqrt(1 - spec.ar**2)
        innov = np.empty(n)
        innov[0] = e[0] * math.sqrt(1 - spec.ar**2)
        for i in range(1, n):
            innov[i] = spec.ar * innov[i - 1] + math.sqrt(1 - spec.ar**2) * e[i]
        x = x + innov
    return Series(x, "hourly", f"synthetic:{seed}")


def read_csv(path: str | Path) -> Series:
    """Two-column ``timestamp,value`` file with a header row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["timestamp", "value"]:
            raise ValueError(f"{path}: expected header 'timestamp,value', got {header}")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                values.append(float(row[1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value {row[1]!r}") from exc
    return Series(np.array(values), "hourly", str(path))


def write_csv(series: Series, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "value"])
        for i, v in enumerate(series.values):
            w.writerow([i, repr(float(v))])


@dataclass(frozen=True)
class SequenceSet:
    windows: np.ndarray
    horizons: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.windows, dtype=np.float64))
        h = np.atleast_2d(np.asarray(self.horizons, dtype=np.float64))
        if w.shape[0] != h.shape[0]:
            raise ValueError("windows and horizons differ in count")
        object.__setattr__(self, "windows", w)
        object.__setattr__(self, "horizons", h)

    def __len__(self):
        return self.windows.shape[0]

    @property
    def vectors(self) -> np.ndarray:
        return np.concatenate([self.windows, self.horizons], axis=1)

    @classmethod
    def from_vectors(cls, vectors, L_in: int) -> "SequenceSet":
        v = np.atleast_2d(vectors)
        return cls(v[:, :L_in], v[:, L_in:])


def windowize(series: Series | np.ndarray, L_in: int, L_out: int, stride: int = 1) -> SequenceSet:
    if min(L_in, L_out, stride) < 1:
        raise ValueError("L_in, L_out and stride must be >= 1")
    v = series.values if isinstance(series, Series) else np.asarray(series, dtype=np.float64)
    span = L_in + L_out
    if v.size < span:
        raise ValueError(f"series of length {v.size} too short for window {span}")
    count = (v.size - span) // stride + 1
    idx = np.arange(count)[:, None] * stride + np.arange(span)[None, :]
    block = v[idx]
    return SequenceSet(block[:, :L_in], block[:, L_in:])


@dataclass(frozen=True)
class MinMaxScaler:
    lo: float
    hi: float

    @classmethod
    def fit(cls, values) -> "MinMaxScaler":
        v = np.asarray(values, dtype=np.float64)
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi)

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def inverse(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def series(self, s: Series) -> Series:
        return replace(s, values=self.transform(s.values))


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    sigma: float = 0.1
    octaves: int = 8
    amplitude: float = 1.0
    ratio: float = 0.3
    fill: float = 1.0

    def validate(self) -> None:
        if self.kind not in ("gaussian", "perlin", "cutout"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("gaussian sigma must be non-negative")
        if self.amplitude < 0:
            raise ValueError("perlin amplitude must be non-negative")
        if self.octaves < 1:
            raise ValueError("perlin octaves must be >= 1")
        if not 0 <= self.ratio <= 1:
            raise ValueError("cutout ratio must lie in [0, 1]")

    @property
    def level(self) -> float:
        return {"gaussian": self.sigma, "perlin": self.amplitude, "cutout": self.ratio}[self.kind]

    def at_level(self, level: float) -> "NoiseSpec":
        key = {"gaussian": "sigma", "perlin": "amplitude", "cutout": "ratio"}[self.kind]
        return replace(self, **{key: float(level)})


def cutout_count(ratio: float, L: int) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004
    return int(math.ceil(round(ratio * L, 9)))


def perlin_field(n: int, L: int, octaves: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """(n, L) octave-summed 1-d gradient noise, lowest wavelength L.

    Octave k has wavelength L / 2^k and weight 2^-k.  The whole batch is then
    affinely mapped so its extremes hit -amplitude and +amplitude.
    """
    lattice = int(2 ** (octaves - 1)) + 2
    grads = rng.uniform(-1.0, 1.0, size=(n, octaves, lattice))
    raw = kernels.perlin_octaves(np.arange(L, dtype=np.float64), grads, float(L))
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12 or amplitude == 0:
        return np.zeros_like(raw)
    return amplitude * (2.0 * (raw - lo) / (hi - lo) - 1.0)


def apply_noise(data: SequenceSet, spec: NoiseSpec, seed: int) -> SequenceSet:
    """Perturb windows only; horizons, size and order are preserved."""
    spec.validate()
    rng = np.random.default_rng(seed)
    w = data.windows.copy()
    n, L = w.shape
    if spec.kind == "gaussian":
        if spec.sigma > 0:
            w += rng.normal(0.0, spec.sigma, size=w.shape)
    elif spec.kind == "perlin":
        w += perlin_field(n, L, spec.octaves, spec.amplitude, rng)
    else:
        k = cutout_count(spec.ratio, L)
        for i in range(n):
            w[i, rng.choice(L, size=k, replace=False)] = spec.fill
    return SequenceSet(w, data.horizons.copy())

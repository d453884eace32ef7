"""Evaluation metrics, distribution-shift measures and verification probes.

The probes restrict the data distribution to a 1-d Gaussian so that every
reference quantity (forward marginals, score, KL) is available in closed
form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .diffusion import NoiseSchedule, draw_dsm, forward_perturb, reverse_sample


def mse_eval(w, dataset) -> float:
    """Mean over samples of ||predict(window) - horizon||^2 / L_out."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(w.sample_losses(dataset.windows, dataset.horizons)))


def wasserstein1(a, b) -> float:
    """Empirical 1-d Wasserstein-1 distance by quantile coupling."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1 needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    # integrated |F_a^-1 - F_b^-1|, same as the CDF-difference integral
    return float(stats.wasserstein_distance(a, b))


def gaussian_kl(m1: float, v1: float, m2: float, v2: float) -> float:
    """KL(N(m1, v1) || N(m2, v2))."""
    if v1 <= 0 or v2 <= 0:
        raise ValueError("variances must be positive")
    return 0.5 * (v1 / v2 + (m2 - m1) ** 2 / v2 - 1.0 + math.log(v2 / v1))


def analytic_gaussian_score(x, t, m0: float, v0: float, sched: NoiseSchedule):
    """Score of the forward marginal N(sqrt(ab) m0, ab v0 + 1 - ab) at step t."""
    if v0 <= 0:
        raise ValueError("v0 must be positive")
    sched.check_step(t)
    ab = sched.alpha_bars[np.asarray(t) - 1]
    return -(np.asarray(x, dtype=np.float64) - np.sqrt(ab) * m0) / (ab * v0 + 1.0 - ab)


@dataclass(frozen=True)
class AnalyticGaussianModel:
    """Noise predictor wired to the exact score of a 1-d Gaussian P0.

    Quacks like a ``ScoreModel`` for sampling and DSM evaluation.
    """

    m0: float
    v0: float
    sched: NoiseSchedule
    dim: int = 1

    def eps(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        ab = self.sched.alpha_bars[t - 1][:, None]
        return -np.sqrt(1.0 - ab) * analytic_gaussian_score(x, t[:, None], self.m0, self.v0, self.sched)

    def check_steps(self, steps) -> None:
        self.sched.check_step(steps)


# ---------------------------------------------------------------------------
# estimates and reports


@dataclass(frozen=True)
class Estimate:
    value: float
    n: int
    se: float

    def as_dict(self):
        return {"value": self.value, "n": self.n, "se": self.se}


@dataclass
class ProbeReport:
    estimates: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    finals: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def as_rows(self):
        """Flat (section, key, value, n, se) rows for columnar output."""
        rows = []
        for k, e in self.estimates.items():
            rows.append(("estimate", k, e.value, e.n, e.se))
        for sec in ("slopes", "finals", "flags"):
            for k, v in getattr(self, sec).items():
                rows.append((sec[:-1], k, v, "", ""))
        return rows


def dsm_estimate(model, x0, sched: NoiseSchedule, step_set=None, seed: int = 0, repeats: int = 1) -> Estimate:
    """DSM loss with the standard error of its per-draw terms."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    steps = list(range(1, sched.T + 1)) if step_set is None else list(step_set)
    draws = draw_dsm(x0.shape[0], x0.shape[1], steps, np.random.default_rng(seed), repeats)
    xt = forward_perturb(x0[draws.rows], draws.t, draws.xi, sched)
    r = draws.xi - model.eps(xt, draws.t)
    per = np.sum(r * r, axis=1)
    return Estimate(float(per.mean()), per.size, float(per.std(ddof=1) / math.sqrt(per.size)))


def moment_fit_kl(samples, m0: float, v0: float) -> Estimate:
    """KL(N(m0, v0) || N(mean, var of samples)); delta-method standard error."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    m, v = float(x.mean()), float(x.var(ddof=1))
    kl = gaussian_kl(m0, v0, m, v)
    d_m = (m - m0) / v
    d_v = 0.5 * (1.0 / v - v0 / v**2 - (m - m0) ** 2 / v**2)
    se = math.sqrt(d_m**2 * v / n + d_v**2 * 2.0 * v**2 / (n - 1))
    return Estimate(kl, n, se)


def spearman(a, b) -> float:
    rho = stats.spearmanr(a, b).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def lemma1_probe(
    models,
    sched: NoiseSchedule,
    m0: float,
    v0: float,
    n_data: int = 2000,
    n_samples: int = 10_000,
    seed: int = 0,
    dsm_repeats: int = 4,
) -> ProbeReport:
    """Score-matching loss vs. output-distribution KL for a Gaussian P0.

    ``models`` is one model or a sequence of checkpoints from one training
    run.  All checkpoints see the same data, DSM draws and sampler noise.
    """
    seq = list(models) if isinstance(models, (list, tuple)) else [models]
    rng = np.random.default_rng(seed)
    data = rng.normal(m0, math.sqrt(v0), size=(n_data, 1))
    dsm_seed, sample_seed = (int(s) for s in rng.integers(2**31, size=2))
    ab_T = float(sched.alpha_bars[-1])
    prior_kl = gaussian_kl(math.sqrt(ab_T) * m0, ab_T * v0 + 1.0 - ab_T, 0.0, 1.0)
    rep = ProbeReport()
    rep.finals["prior_kl"] = prior_kl
    dsm_vals, kl_vals = [], []
    for i, model in enumerate(seq):
        d = dsm_estimate(model, data, sched, seed=dsm_seed, repeats=dsm_repeats)
        k = moment_fit_kl(reverse_sample(model, sched, n_samples, sample_seed), m0, v0)
        suffix = "" if len(seq) == 1 else f"[{i}]"
        rep.estimates["dsm" + suffix] = d
        rep.estimates["kl" + suffix] = k
        dsm_vals.append(d.value)
        kl_vals.append(k.value)
    if len(seq) > 1:
        rho = spearman(dsm_vals, kl_vals)
        rep.finals["spearman"] = rho
        rep.flags["kl_tracks_dsm"] = rho > 0
    return rep


def smoothed_slope(trace, width: int = 5) -> float:
    """Least-squares slope of the centered moving average (``valid`` part)."""
    y = np.asarray(trace, dtype=np.float64)
    if y.size < 2:
        return 0.0
    if y.size >= width:
        y = np.convolve(y, np.ones(width) / width, mode="valid")
    if y.size < 2:
        return 0.0
    return float(np.polyfit(np.arange(y.size, dtype=np.float64), y, 1)[0])


def constraint_violation(J_trace, eps: float) -> float:
    """max{0, mean_k J_k - eps}."""
    J = np.asarray(J_trace, dtype=np.float64)
    if J.size == 0:
        raise ValueError("empty J trace")
    return max(0.0, float(J.mean()) - eps)


def convergence_probe(result) -> ProbeReport:
    """Constraint violation, E[f] trend and the outer gradient-norm trend of a run."""
    for name in ("inner_traces", "grad_norms", "losses"):
        if getattr(result, name, None) is None:
            raise ValueError(f"run result has no {name} trace")
    if len(result.grad_norms) != len(result.losses):
        raise ValueError("incomplete traces: loss and gradient-norm lengths differ")
    rep = ProbeReport()
    J = [j for tr in result.inner_traces for j in tr.J]
    Ef = [e for tr in result.inner_traces for e in tr.expected_f]
    if J:
        rep.finals["violation"] = constraint_violation(J, result.budget)
        rep.finals["mean_J"] = float(np.mean(J))
        rep.slopes["expected_f"] = smoothed_slope(Ef)
        rep.flags["inner_ascends"] = rep.slopes["expected_f"] >= 0
    if len(result.grad_norms):
        rep.slopes["grad_norm"] = smoothed_slope(result.grad_norms)
        rep.slopes["outer_loss"] = smoothed_slope(result.losses)
        rep.finals["grad_norm"] = float(result.grad_norms[-1])
        rep.flags["grad_norm_decreasing"] = rep.slopes["grad_norm"] <= 0
    return rep


"""Sequence predictors (the decision variable w) and their losses."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .tensor import Tensor, init_params, matmul, mean, mlp, square, sum_, tanh


@dataclass
class DecisionModel:
    """Maps a length-``L_in`` window to a length-``L_out`` horizon.

    ``arch="mlp"``: dense tanh network on the flat window.
    ``arch="rnn"``: single-layer Elman cell read left to right, linear head.
    """

    params: list
    L_in: int
    L_out: int
    hidden: tuple = (32,)
    arch: str = "mlp"

    @classmethod
    def create(cls, L_in: int, L_out: int, hidden: Sequence[int] = (32,), seed: int = 0, arch: str = "mlp"):
        hidden = tuple(int(h) for h in hidden)
        if arch == "mlp":
            params = init_params([L_in, *hidden, L_out], seed)
        elif arch == "rnn":
            H = hidden[0]
            rng = np.random.default_rng(seed)
            params = [
                rng.normal(0, 1.0, (1, H)),
                rng.normal(0, 1.0 / np.sqrt(H), (H, H)) * 0.5,
                np.zeros(H),
                rng.normal(0, 1.0 / np.sqrt(H), (H, L_out)),
                np.zeros(L_out),
            ]
        else:
            raise ValueError(f"unknown predictor arch {arch!r}")
        return cls(params, L_in, L_out, hidden, arch)

    def with_params(self, params) -> "DecisionModel":
        return replace(self, params=[np.array(p, dtype=np.float64) for p in params])

    def predict(self, windows) -> np.ndarray:
        return predict_graph([Tensor(p) for p in self.params], self, windows).data

    def sample_losses(self, windows, horizons) -> np.ndarray:
        """f(w, x) = ||predict(window) - horizon||^2 / L_out per sample."""
        r = self.predict(windows) - np.asarray(horizons, dtype=np.float64)
        return np.sum(r * r, axis=1) / self.L_out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])


def predict_graph(params: Sequence[Tensor], model: DecisionModel, windows) -> Tensor:
    x = windows if isinstance(windows, Tensor) else Tensor(np.atleast_2d(np.asarray(windows, dtype=np.float64)))
    if x.shape[1] != model.L_in:
        raise ValueError(f"window length {x.shape[1]} != L_in {model.L_in}")
    if model.arch == "mlp":
        return mlp(x, params)
    Wx, Wh, b, Wo, bo = params
    h = tanh(matmul(x[:, 0:1], Wx) + b)
    for k in range(1, model.L_in):
        h = tanh(matmul(x[:, k : k + 1], Wx) + matmul(h, Wh) + b)
    return matmul(h, Wo) + bo


def loss_graph(params: Sequence[Tensor], model: DecisionModel, windows, horizons, weights=None) -> Tensor:
    """Mean (or ``weights``-weighted) squared prediction error."""
    pred = predict_graph(params, model, windows)
    per = sum_(square(pred - np.asarray(horizons, dtype=np.float64)), axis=1) * (1.0 / model.L_out)
    if weights is None:
        return mean(per)
    return sum_(per * np.asarray(weights, dtype=np.float64))


def split_vectors(vectors, L_in: int):
    """Generated (n, L_in + L_out) vectors -> (windows, horizons)."""
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    return v[:, :L_in], v[:, L_in:]


def join_vectors(windows, horizons) -> np.ndarray:
    return np.concatenate([np.atleast_2d(windows), np.atleast_2d(horizons)], axis=1)

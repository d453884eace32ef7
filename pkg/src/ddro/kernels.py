"""Hot-loop dispatch: compiled extension when importable, numpy otherwise.

Set ``DDRO_PURE_PYTHON=1`` to force the numpy path.  Both backends consume
identical pre-drawn randomness, so they agree to rounding error.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("DDRO_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "python"


def _impl(backend: str | None):
    backend = backend or BACKEND
    if backend == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return _ckernels
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown backend {backend!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def reverse_chain(xT, z, c1, c2, sigmas, layers, backend: str | None = None) -> np.ndarray:
    """Run the ancestral chain from x_T.  ``layers[k]`` holds the step-(k+1)
    network as ``(W1x, B1, W2, b2, W3, b3)`` with the time embedding already
    folded into ``B1``.  Returns states of shape (T+1, n, d), index = step."""
    stacked = [_c(np.stack([layer[i] for layer in layers])) for i in range(6)]
    return _impl(backend).reverse_chain(_c(xT), _c(z), _c(c1), _c(c2), _c(sigmas), *stacked)


def perlin_octaves(pos, grads, base_period: float, backend: str | None = None) -> np.ndarray:
    return _impl(backend).perlin_octaves(_c(pos), _c(grads), float(base_period))

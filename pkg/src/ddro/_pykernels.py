"""Pure numpy versions of the compiled kernels (same signatures)."""

import numpy as np


def reverse_chain(xT, z, c1, c2, sigmas, W1, B1, W2, b2, W3, b3):
    T = z.shape[0]
    out = np.empty((T + 1,) + xT.shape)
    out[T] = xT
    for t in range(T, 0, -1):
        k = t - 1
        x = out[t]
        h = np.tanh(x @ W1[k] + B1[k])
        h = np.tanh(h @ W2[k] + b2[k])
        e = h @ W3[k] + b3[k]
        out[k] = c1[k] * (x - c2[k] * e) + sigmas[k] * z[k]
    return out


def _fade(u):
    return u * u * u * (u * (u * 6.0 - 15.0) + 10.0)


def perlin_octaves(pos, grads, base_period):
    nf, no, nl = grads.shape
    out = np.zeros((nf, pos.size))
    period, amp = base_period, 1.0
    for o in range(no):
        x = pos / period
        i0 = np.floor(x).astype(np.int64)
        fr = x - i0
        g0 = grads[:, o, i0 % nl] * fr
        g1 = grads[:, o, (i0 + 1) % nl] * (fr - 1.0)
        out += amp * (g0 + _fade(fr) * (g1 - g0))
        period /= 2.0
        amp /= 2.0
    return out

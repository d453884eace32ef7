# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``ddro._pykernels`` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, fmin as min, fmax as max
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _tanh(double x) noexcept nogil:
    # glibc exp vectorizes (libmvec) where tanh does not; absolute error ~1e-16
    x = min(max(x, -20.0), 20.0)
    return 1.0 - 2.0 / (exp(2.0 * x) + 1.0)


cdef void _bias_tanh(int n, int h, double* H, double* bias) noexcept nogil:
    cdef int i, j
    cdef double* row
    for i in range(n):
        row = H + i * h
        for j in range(h):
            row[j] = _tanh(row[j] + bias[j])


cdef void _rowmajor_gemm(int n, int k, int m, double* A, double* B, double* C) noexcept nogil:
    # C (n x m) = A (n x k) @ B (k x m), all C-contiguous
    cdef char tr = b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&tr, &tr, &m, &n, &k, &one, B, &m, A, &k, &zero, C, &m)


def reverse_chain(double[:, ::1] xT, double[:, :, ::1] z,
                  double[::1] c1, double[::1] c2, double[::1] sigmas,
                  double[:, :, ::1] W1, double[:, ::1] B1,
                  double[:, :, ::1] W2, double[:, ::1] b2,
                  double[:, :, ::1] W3, double[:, ::1] b3):
    cdef int T = z.shape[0], n = xT.shape[0], d = xT.shape[1], h = B1.shape[1]
    out = np.empty((T + 1, n, d))
    cdef double[:, :, ::1] S = out
    cdef double[:, ::1] H1 = np.empty((n, h))
    cdef double[:, ::1] H2 = np.empty((n, h))
    cdef double[:, ::1] E = np.empty((n, d))
    cdef int t, i, j, k
    cdef double a, b, s
    S[T, :, :] = xT
    with nogil:
        for t in range(T, 0, -1):
            k = t - 1
            _rowmajor_gemm(n, d, h, &S[t, 0, 0], &W1[k, 0, 0], &H1[0, 0])
            _bias_tanh(n, h, &H1[0, 0], &B1[k, 0])
            _rowmajor_gemm(n, h, h, &H1[0, 0], &W2[k, 0, 0], &H2[0, 0])
            _bias_tanh(n, h, &H2[0, 0], &b2[k, 0])
            _rowmajor_gemm(n, h, d, &H2[0, 0], &W3[k, 0, 0], &E[0, 0])
            a = c1[k]
            b = c2[k]
            s = sigmas[k]
            for i in range(n):
                for j in range(d):
                    S[k, i, j] = a * (S[t, i, j] - b * (E[i, j] + b3[k, j])) + s * z[k, i, j]
    return out


cdef inline double _fade(double u) noexcept nogil:
    return u * u * u * (u * (u * 6.0 - 15.0) + 10.0)


def perlin_octaves(double[::1] pos, double[:, :, ::1] grads, double base_period):
    """Sum over octaves of 1-d gradient noise; ``grads[field, octave, lattice]``."""
    cdef int nf = grads.shape[0], no = grads.shape[1], nl = grads.shape[2]
    cdef int L = pos.shape[0]
    out = np.zeros((nf, L))
    cdef double[:, ::1] O = out
    cdef int f, o, p, i0
    cdef double period, amp, x, u, g0, g1, fr
    with nogil:
        for f in range(nf):
            period = base_period
            amp = 1.0
            for o in range(no):
                for p in range(L):
                    x = pos[p] / period
                    i0 = <int> floor(x)
                    fr = x - i0
                    g0 = grads[f, o, i0 % nl] * fr
                    g1 = grads[f, o, (i0 + 1) % nl] * (fr - 1.0)
                    u = _fade(fr)
                    O[f, p] += amp * (g0 + u * (g1 - g0))
                period = period / 2.0
                amp = amp / 2.0
    return out

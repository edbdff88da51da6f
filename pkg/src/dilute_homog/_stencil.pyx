# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the 7-point conservative stencil.

Vectors live in the compressed unknown space with one extra trailing slot
that is kept at zero; every inactive or prescribed node maps to that slot,
so the stencil loop needs no branches.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef void _apply(const cnp.int64_t[::1] active, const cnp.int32_t[::1] idx,
                 const double[::1] diag, const double[::1] cx, const double[::1] cy,
                 const double[::1] cz, Py_ssize_t sx, Py_ssize_t sy,
                 const double[::1] x, double[::1] y) noexcept nogil:
    cdef Py_ssize_t t, p, n = y.shape[0] - 1
    cdef double s
    for t in range(n + 1):
        y[t] = 0.0
    for t in range(active.shape[0]):
        p = active[t]
        s = diag[p] * x[idx[p]]
        s -= cx[p] * x[idx[p + sx]] + cx[p - sx] * x[idx[p - sx]]
        s -= cy[p] * x[idx[p + sy]] + cy[p - sy] * x[idx[p - sy]]
        s -= cz[p] * x[idx[p + 1]] + cz[p - 1] * x[idx[p - 1]]
        y[idx[p]] += s
    y[n] = 0.0


def apply(cnp.int64_t[::1] active, cnp.int32_t[::1] idx, double[::1] diag,
          double[::1] cx, double[::1] cy, double[::1] cz, Py_ssize_t sx, Py_ssize_t sy,
          double[::1] x):
    """Return ``A @ x`` for the merged-unknown stencil operator."""
    y = np.zeros(x.shape[0])
    cdef double[::1] yv = y
    with nogil:
        _apply(active, idx, diag, cx, cy, cz, sx, sy, x, yv)
    return y


def pcg(cnp.int64_t[::1] active, cnp.int32_t[::1] idx, double[::1] diag,
        double[::1] cx, double[::1] cy, double[::1] cz, Py_ssize_t sx, Py_ssize_t sy,
        double[::1] b, double[::1] x, double[::1] dinv, double tol, Py_ssize_t maxiter):
    """Jacobi-preconditioned conjugate gradients, in place on ``x``.

    Returns ``(iterations, relative_residual)``; the residual is
    ``||b - A x|| / ||b||``.
    """
    cdef Py_ssize_t n = x.shape[0] - 1, i, it = 0
    r_arr = np.empty(n + 1)
    z_arr = np.empty(n + 1)
    p_arr = np.empty(n + 1)
    q_arr = np.empty(n + 1)
    cdef double[::1] r = r_arr, z = z_arr, p = p_arr, q = q_arr
    cdef double bnorm = 0.0, rnorm = 0.0, rz = 0.0, rz_new, pq, alpha, beta
    with nogil:
        for i in range(n):
            bnorm += b[i] * b[i]
        bnorm = sqrt(bnorm)
        if bnorm == 0.0:
            for i in range(n + 1):
                x[i] = 0.0
        else:
            x[n] = 0.0
            _apply(active, idx, diag, cx, cy, cz, sx, sy, x, q)
            for i in range(n):
                r[i] = b[i] - q[i]
                z[i] = dinv[i] * r[i]
                p[i] = z[i]
                rz += r[i] * z[i]
                rnorm += r[i] * r[i]
            r[n] = 0.0
            z[n] = 0.0
            p[n] = 0.0
            rnorm = sqrt(rnorm)
            while rnorm > tol * bnorm and it < maxiter:
                _apply(active, idx, diag, cx, cy, cz, sx, sy, p, q)
                pq = 0.0
                for i in range(n):
                    pq += p[i] * q[i]
                alpha = rz / pq
                rz_new = 0.0
                rnorm = 0.0
                for i in range(n):
                    x[i] += alpha * p[i]
                    r[i] -= alpha * q[i]
                    z[i] = dinv[i] * r[i]
                    rz_new += r[i] * z[i]
                    rnorm += r[i] * r[i]
                rnorm = sqrt(rnorm)
                beta = rz_new / rz
                rz = rz_new
                for i in range(n):
                    p[i] = z[i] + beta * p[i]
                it += 1
    if bnorm == 0.0:
        return 0, 0.0
    return it, rnorm / bnorm

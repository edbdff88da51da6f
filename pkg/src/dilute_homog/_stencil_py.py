"""Pure-numpy fallback for the compiled stencil kernels (same signatures)."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _matrix(active, idx, diag, cx, cy, cz, sx, sy, n1):
    rows = idx[active]
    parts_r = [rows]
    parts_c = [rows]
    parts_v = [diag[active]]
    for c, s in ((cx, sx), (cy, sy), (cz, 1)):
        for off, coef in ((s, c[active]), (-s, c[active - s])):
            parts_r.append(rows)
            parts_c.append(idx[active + off])
            parts_v.append(-coef)
    A = sp.coo_matrix((np.concatenate(parts_v), (np.concatenate(parts_r), np.concatenate(parts_c))),
                      shape=(n1, n1)).tocsr()
    A.sum_duplicates()
    return A


def apply(active, idx, diag, cx, cy, cz, sx, sy, x):
    A = _matrix(active, idx, diag, cx, cy, cz, sx, sy, len(x))
    y = A @ x
    y[-1] = 0.0
    return y


def pcg(active, idx, diag, cx, cy, cz, sx, sy, b, x, dinv, tol, maxiter):
    n = len(x) - 1
    A = _matrix(active, idx, diag, cx, cy, cz, sx, sy, n + 1)
    bnorm = float(np.sqrt(np.dot(b[:n], b[:n])))
    if bnorm == 0.0:
        x[:] = 0.0
        return 0, 0.0
    x[n] = 0.0
    r = b - A @ x
    r[n] = 0.0
    z = dinv * r
    z[n] = 0.0
    p = z.copy()
    rz = float(np.dot(r, z))
    rnorm = float(np.sqrt(np.dot(r, r)))
    it = 0
    while rnorm > tol * bnorm and it < maxiter:
        q = A @ p
        q[n] = 0.0
        alpha = rz / float(np.dot(p, q))
        x += alpha * p
        r -= alpha * q
        z = dinv * r
        z[n] = 0.0
        rz_new = float(np.dot(r, z))
        rnorm = float(np.sqrt(np.dot(r, r)))
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    x[n] = 0.0
    return it, rnorm / bnorm

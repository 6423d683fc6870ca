"""Loop kernels compiled with numba.

Every kernel here has a twin in ``_numpy_kernels`` with the same signature.
Accumulations run in float64 with a fixed loop order so results do not depend
on scheduling.
"""
import math

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def matmul(X, Y):
    m, k = X.shape
    n = Y.shape[1]
    acc = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for l in range(k):
            x = np.float64(X[i, l])
            for j in range(n):
                acc[i, j] += x * np.float64(Y[l, j])
    return acc.astype(np.float32)


@_jit
def magnitude_mask(M, p):
    flat = np.abs(M.ravel())
    order = np.argsort(flat, kind="mergesort")
    keep = np.ones(flat.size, dtype=np.bool_)
    for i in range(p):
        keep[order[i]] = False
    return keep.reshape(M.shape)


@_jit
def row_l1(M):
    rows, cols = M.shape
    out = np.zeros(rows, dtype=np.float64)
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            s += abs(np.float64(M[i, j]))
        out[i] = s
    return out


@_jit
def householder_qr(M):
    m, n = M.shape
    R = M.copy()
    vs = np.zeros((m, n))
    betas = np.zeros(n)
    for j in range(n):
        norm2 = 0.0
        for i in range(j, m):
            norm2 += R[i, j] * R[i, j]
        if norm2 == 0.0:
            continue
        alpha = math.sqrt(norm2)
        if R[j, j] < 0.0:
            alpha = -alpha
        for i in range(j, m):
            vs[i, j] = R[i, j]
        vs[j, j] += alpha
        vnorm2 = 0.0
        for i in range(j, m):
            vnorm2 += vs[i, j] * vs[i, j]
        beta = 2.0 / vnorm2
        betas[j] = beta
        for c in range(j, n):
            s = 0.0
            for i in range(j, m):
                s += vs[i, j] * R[i, c]
            s *= beta
            for i in range(j, m):
                R[i, c] -= s * vs[i, j]

    Q = np.zeros((m, n))
    for j in range(n):
        Q[j, j] = 1.0
    for j in range(n - 1, -1, -1):
        beta = betas[j]
        if beta == 0.0:
            continue
        for c in range(n):
            s = 0.0
            for i in range(j, m):
                s += vs[i, j] * Q[i, c]
            s *= beta
            for i in range(j, m):
                Q[i, c] -= s * vs[i, j]

    Rout = np.zeros((n, n))
    for i in range(n):
        for c in range(i, n):
            Rout[i, c] = R[i, c]
    for i in range(n):
        if Rout[i, i] < 0.0:
            for c in range(i, n):
                Rout[i, c] = -Rout[i, c]
            for r in range(m):
                Q[r, i] = -Q[r, i]
    return Q, Rout


@_jit
def one_sided_jacobi(G, tol, max_sweeps, null_norm2):
    """Cyclic one-sided Jacobi; returns (W, V, sweeps, off) with G @ V = W."""
    m, n = G.shape
    W = G.copy()
    V = np.eye(n)
    off = np.inf  # unconverged until a sweep says otherwise
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += W[i, p] * W[i, p]
                    beta += W[i, q] * W[i, q]
                    gamma += W[i, p] * W[i, q]
                if alpha <= null_norm2 or beta <= null_norm2 or gamma == 0.0:
                    continue
                cosine = abs(gamma) / math.sqrt(alpha * beta)
                if cosine > off:
                    off = cosine
                if cosine <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    wp = W[i, p]
                    wq = W[i, q]
                    W[i, p] = c * wp - s * wq
                    W[i, q] = s * wp + c * wq
                for i in range(n):
                    vp = V[i, p]
                    vq = V[i, q]
                    V[i, p] = c * vp - s * vq
                    V[i, q] = s * vp + c * vq
        if off <= tol:
            return W, V, sweep + 1, off
    return W, V, max_sweeps, off

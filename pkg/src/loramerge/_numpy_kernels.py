"""Vectorised numpy twins of the numba kernels.

``matmul``, ``magnitude_mask`` and ``row_l1`` reproduce the numba results bit
for bit.  The QR and Jacobi kernels use a different summation order (and a
round-robin pair schedule for Jacobi), so they agree to rounding only.
"""
import numpy as np


def matmul(X, Y):
    X = X.astype(np.float64)
    Y = Y.astype(np.float64)
    acc = np.zeros((X.shape[0], Y.shape[1]))
    for l in range(X.shape[1]):
        acc += np.multiply.outer(X[:, l], Y[l, :])
    return acc.astype(np.float32)


def magnitude_mask(M, p):
    flat = np.abs(M.ravel())
    order = np.argsort(flat, kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:p]] = False
    return keep.reshape(M.shape)


def row_l1(M):
    A = np.abs(M.astype(np.float64))
    out = np.zeros(M.shape[0])
    for j in range(M.shape[1]):
        out += A[:, j]
    return out


def householder_qr(M):
    m, n = M.shape
    R = M.copy()
    vs = np.zeros((m, n))
    betas = np.zeros(n)
    for j in range(n):
        x = R[j:, j]
        norm2 = x @ x
        if norm2 == 0.0:
            continue
        alpha = np.sqrt(norm2)
        if x[0] < 0.0:
            alpha = -alpha
        v = x.copy()
        v[0] += alpha
        beta = 2.0 / (v @ v)
        vs[j:, j] = v
        betas[j] = beta
        R[j:, j:] -= np.outer(v, beta * (v @ R[j:, j:]))

    Q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        if betas[j] == 0.0:
            continue
        v = vs[j:, j]
        Q[j:, :] -= np.outer(v, betas[j] * (v @ Q[j:, :]))

    R = np.triu(R[:n, :])
    flip = np.diag(R) < 0.0
    R[flip, :] *= -1.0
    Q[:, flip] *= -1.0
    return Q, R


def _round_robin(n):
    """Yield (p, q) index arrays covering every column pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        yield np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
        players = [players[0], players[-1]] + players[1:-1]


def one_sided_jacobi(G, tol, max_sweeps, null_norm2):
    m, n = G.shape
    W = G.copy()
    V = np.eye(n)
    schedule = list(_round_robin(n))
    off = np.inf  # unconverged until a sweep says otherwise
    for sweep in range(max_sweeps):
        off = 0.0
        for P, Q in schedule:
            if P.size == 0:
                continue
            Wp, Wq = W[:, P], W[:, Q]
            alpha = np.einsum("ij,ij->j", Wp, Wp)
            beta = np.einsum("ij,ij->j", Wq, Wq)
            gamma = np.einsum("ij,ij->j", Wp, Wq)
            live = (alpha > null_norm2) & (beta > null_norm2) & (gamma != 0.0)
            if not live.any():
                continue
            cosine = np.zeros_like(gamma)
            cosine[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            off = max(off, cosine.max())
            rot = cosine > tol
            if not rot.any():
                continue
            zeta = (beta[rot] - alpha[rot]) / (2.0 * gamma[rot])
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            pr, qr = P[rot], Q[rot]
            for M in (W, V):
                Mp, Mq = M[:, pr], M[:, qr]
                M[:, pr] = c * Mp - s * Mq
                M[:, qr] = s * Mp + c * Mq
        if off <= tol:
            return W, V, sweep + 1, off
    return W, V, max_sweeps, off

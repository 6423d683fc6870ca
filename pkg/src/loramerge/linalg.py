"""Dense float32 kernels: products, magnitude masks, thin QR and SVD.

Matrices are plain 2-D ``numpy.float32`` arrays.  Reductions accumulate in
float64 with a fixed order and round once on output, so every function is a
deterministic pure function of its inputs.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from ._backend import BACKEND, KERNELS
from .errors import NumericError, ParameterError, ShapeError, ValidationError

__all__ = [
    "BACKEND",
    "SvdTriple",
    "as_matrix",
    "matmul",
    "magnitude_mask",
    "apply_mask",
    "row_l1",
    "thin_qr",
    "jacobi_svd",
    "lowrank_svd",
]

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# columns whose norm is below this fraction of ||G||_F are numerically null
_NULL_REL = 1e-13
_SIGN_EPS = 1e-6


class SvdTriple(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        U = self.U.astype(np.float64)
        V = self.V.astype(np.float64)
        return (U * self.sigma) @ V.T


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a C-contiguous finite float32 matrix or raise."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def matmul(X, Y) -> np.ndarray:
    X = as_matrix(X, "left operand")
    Y = as_matrix(Y, "right operand")
    if X.shape[1] != Y.shape[0]:
        raise ShapeError(
            f"cannot multiply left operand {X.shape} by right operand {Y.shape}"
        )
    return KERNELS.matmul(X, Y)


def pruned_count(numel: int, k: float) -> int:
    # k*numel can land a hair under an integer (0.3*10 -> 2.9999999999999996)
    return int(math.floor(k * numel + 1e-9))


def magnitude_mask(M, k: float) -> np.ndarray:
    """Boolean keep-mask zeroing the ``floor(k * numel)`` smallest magnitudes.

    Ties are broken by ascending row-major flat index, so the earliest of
    equal-magnitude entries is pruned first.
    """
    if not (0.0 <= k < 1.0):
        raise ParameterError(f"pruning rate must lie in [0, 1), got {k!r}")
    M = as_matrix(M)
    return KERNELS.magnitude_mask(M, pruned_count(M.size, k))


def apply_mask(M, mask) -> np.ndarray:
    M = as_matrix(M)
    mask = np.asarray(mask)
    if mask.shape != M.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match matrix {M.shape}")
    return np.where(mask.astype(bool), M, np.float32(0.0)).astype(np.float32)


def row_l1(M) -> np.ndarray:
    return KERNELS.row_l1(as_matrix(M))


def _qr64(M: np.ndarray):
    m, n = M.shape
    if m < n:
        raise ShapeError(f"thin_qr needs rows >= cols, got {M.shape}; transpose first")
    return KERNELS.householder_qr(np.ascontiguousarray(M, dtype=np.float64))


def thin_qr(M):
    """Householder thin QR with a non-negative diagonal on ``R``."""
    Q, R = _qr64(as_matrix(M))
    return Q.astype(np.float32), R.astype(np.float32)


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``U`` not flagged ``good`` with an orthonormal completion."""
    m = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(good)]
    out = U.copy()
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~good):
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                v /= norm
                break
        basis.append(v)
        out[:, j] = v
    return out


def _canonical_signs(U: np.ndarray, V: np.ndarray):
    for j in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, j]) > _SIGN_EPS)
        if nz.size and V[nz[0], j] < 0.0:
            V[:, j] = -V[:, j]
            U[:, j] = -U[:, j]
    return U, V


def _svd64(G: np.ndarray):
    """SVD of a float64 matrix with rows >= cols; returns float64 (U, sigma, V)."""
    fro2 = float(np.sum(G * G))
    null_norm2 = (_NULL_REL * _NULL_REL) * fro2
    W, V, sweeps, off = KERNELS.one_sided_jacobi(
        np.ascontiguousarray(G), JACOBI_TOL, JACOBI_MAX_SWEEPS, null_norm2
    )
    if off > JACOBI_TOL:
        raise NumericError(
            f"Jacobi SVD did not converge in {sweeps} sweeps (residual {off:.3e})",
            residual=off,
        )
    sigma = np.sqrt(np.einsum("ij,ij->j", W, W))
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]
    good = sigma > max(math.sqrt(null_norm2), 1e-300)
    U = np.zeros_like(W)
    U[:, good] = W[:, good] / sigma[good]
    if not good.all():
        U = _complete_basis(U, good)
    return U, sigma, V


def jacobi_svd(C) -> SvdTriple:
    """One-sided Jacobi SVD of a small square matrix."""
    C = as_matrix(C)
    if C.shape[0] != C.shape[1]:
        raise ShapeError(f"jacobi_svd expects a square matrix, got {C.shape}")
    U, sigma, V = _svd64(C.astype(np.float64))
    U, V = _canonical_signs(U, V)
    return SvdTriple(U.astype(np.float32), sigma, V.astype(np.float32))


def lowrank_svd(factors: Sequence[tuple]) -> SvdTriple:
    """Economy SVD of ``sum_i B_i @ A_i`` without forming the dense product.

    The stacked ``B`` factors and the stacked ``A`` transposes are each reduced
    by thin QR; only the small ``R_B @ R_A.T`` core goes through Jacobi.
    """
    if not factors:
        raise ShapeError("lowrank_svd needs at least one (B, A) factor pair")
    Bs, As = [], []
    for i, (B, A) in enumerate(factors):
        B = as_matrix(B, f"B[{i}]")
        A = as_matrix(A, f"A[{i}]")
        if B.shape[1] != A.shape[0]:
            raise ShapeError(f"factor {i}: B {B.shape} and A {A.shape} ranks differ")
        Bs.append(B)
        As.append(A)
    d_out, d_in = Bs[0].shape[0], As[0].shape[1]
    for i, (B, A) in enumerate(zip(Bs, As)):
        if B.shape[0] != d_out or A.shape[1] != d_in:
            raise ShapeError(
                f"factor {i} maps {A.shape[1]}->{B.shape[0]}, expected {d_in}->{d_out}"
            )
    B = np.hstack(Bs).astype(np.float64)
    A = np.vstack(As).astype(np.float64)
    q = B.shape[1]
    if q > min(d_out, d_in):
        raise ShapeError(f"total rank {q} exceeds min(d_out, d_in) = {min(d_out, d_in)}")
    Qb, Rb = _qr64(B)
    Qa, Ra = _qr64(np.ascontiguousarray(A.T))
    Uc, sigma, Vc = _svd64(Rb @ Ra.T)
    U, V = _canonical_signs(Qb @ Uc, Qa @ Vc)
    return SvdTriple(U.astype(np.float32), sigma, V.astype(np.float32))

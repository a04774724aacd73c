"""Dense complex matrix kernels.

All matrices are ``complex128`` numpy arrays stored in row-major (C) order.
Multi-index tensors are reshaped into matrices by grouping leading indices
into rows, e.g. a tensor ``t[a, b, c, t]`` becomes ``t.reshape(a*b*c, t)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import opt_einsum

__all__ = [
    "LinearOperator",
    "ShapeError",
    "ConvergenceError",
    "SingularSylvesterError",
    "qr_thin",
    "svd",
    "eigh",
    "expm_skew",
    "polar",
    "solve_sylvester_hpd",
    "arnoldi_dominant",
    "gmres_solve",
    "contract",
    "make_rng",
]


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance.

    The best iterate found so far is attached as ``result`` and its residual
    as ``residual``.
    """

    def __init__(self, message: str, residual: float, result=None):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual
        self.result = result


class SingularSylvesterError(np.linalg.LinAlgError):
    """The pencil ``lambda_i + lambda_j`` of a Sylvester problem vanishes."""


@dataclass(frozen=True)
class LinearOperator:
    """A linear map on ``C^dim`` given by a matvec callable."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "LinearOperator":
        M = np.asarray(M)
        return cls(M.shape[0], lambda v: M @ v)


def make_rng(seed: int | None) -> np.random.Generator:
    """Counter-based (Philox) generator; reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite entries in input")


def qr_thin(M):
    """Thin QR with a non-negative real diagonal in ``R``.

    Returns ``Q`` (n x p, isometric) and ``R`` (p x p, upper triangular).
    """
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2:
        raise ShapeError("qr_thin expects a matrix")
    n, p = M.shape
    if n < p:
        raise ShapeError(f"qr_thin needs rows >= cols, got {n}x{p}")
    _check_finite(M)
    Q, R = np.linalg.qr(M, mode="reduced")
    d = np.diagonal(R)
    absd = np.abs(d)
    phase = np.where(absd > 0, d / np.where(absd > 0, absd, 1), 1.0)
    Q = Q * phase
    R = phase.conj()[:, None] * R
    R[np.diag_indices(p)] = np.abs(np.diagonal(R))
    return Q, R


def svd(M):
    """Thin SVD ``M = U diag(S) V^dagger`` with ``S`` descending."""
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2:
        raise ShapeError("svd expects a matrix")
    _check_finite(M)
    U, S, Vh = np.linalg.svd(M, full_matrices=False)
    return U, S, Vh.conj().T


def eigh(H):
    """Eigendecomposition of a hermitian matrix (ascending eigenvalues).

    The input is symmetrized first, so small hermiticity defects are
    tolerated.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeError("eigh expects a square matrix")
    _check_finite(H)
    return np.linalg.eigh(0.5 * (H + H.conj().T))


def expm_skew(K):
    """Matrix exponential of a skew-hermitian matrix, unitary by construction."""
    K = np.asarray(K, dtype=complex)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError("expm_skew expects a square matrix")
    if K.shape[0] == 0:
        return K.copy()
    lam, U = eigh(1j * K)
    return (U * np.exp(-1j * lam)) @ U.conj().T


def polar(M):
    """Polar decomposition ``M = Q P`` via the SVD.

    Returns ``(Q, P, rank_deficient)``; ``Q = U V^dagger`` is an isometry
    even when ``M`` is rank deficient, in which case the columns spanning the
    null directions are whatever the SVD returned.
    """
    M = np.asarray(M, dtype=complex)
    n, p = M.shape
    if n < p:
        raise ShapeError(f"polar needs rows >= cols, got {n}x{p}")
    U, S, V = svd(M)
    Q = U @ V.conj().T
    P = (V * S) @ V.conj().T
    P = 0.5 * (P + P.conj().T)
    smax = S[0] if S.size else 0.0
    rank_deficient = bool(S.size and S[-1] <= 1e-14 * max(smax, 1e-300))
    return Q, P, rank_deficient


def solve_sylvester_hpd(rho, A, eig=None):
    """Solve ``X rho + rho X = 2 A`` for hermitian PSD ``rho``.

    Solved in the eigenbasis of ``rho``. ``eig`` may carry a precomputed
    ``(lam, U)`` pair of ``rho``.
    """
    A = np.asarray(A, dtype=complex)
    lam, U = eigh(rho) if eig is None else eig
    if A.shape != (lam.size, lam.size):
        raise ShapeError("rho and A must be square of equal size")
    denom = lam[:, None] + lam[None, :]
    scale = max(np.max(np.abs(lam)) if lam.size else 0.0, 1e-300)
    if np.any(denom <= 1e-14 * scale):
        raise SingularSylvesterError("singular Sylvester pencil")
    Ap = U.conj().T @ A @ U
    X = U @ (2.0 * Ap / denom) @ U.conj().T
    if np.allclose(A, -A.conj().T, atol=1e-14 * (np.linalg.norm(A) + 1e-300)):
        X = 0.5 * (X - X.conj().T)
    return X


def _arnoldi_cycle(op, v, m):
    """One Arnoldi cycle of at most ``m`` steps starting from unit vector v."""
    n = v.size
    V = np.zeros((m + 1, n), dtype=complex)
    H = np.zeros((m + 1, m), dtype=complex)
    V[0] = v
    k = m
    for j in range(m):
        w = op(V[j])
        # two passes of classical Gram-Schmidt
        for _ in range(2):
            h = V[: j + 1].conj() @ w
            w = w - h @ V[: j + 1]
            H[: j + 1, j] += h
        beta = np.linalg.norm(w)
        H[j + 1, j] = beta
        if beta <= 1e-14 * max(np.linalg.norm(H[: j + 2, j]), 1e-300):
            k = j + 1
            break
        V[j + 1] = w / beta
    return V[: k + 1], H[: k + 1, :k], k


def arnoldi_dominant(op, v0, krylov_dim=4, tol=1e-12, max_restarts=500):
    """Dominant eigenpair of ``op`` by explicitly restarted Arnoldi.

    ``v0`` is the warm start. Returns ``(lam, v, n_apply)`` with ``v`` of unit
    norm and ``n_apply`` the number of operator applications used.
    """
    v = np.asarray(v0, dtype=complex).ravel()
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("arnoldi_dominant needs a nonzero start vector")
    v = v / nv
    m = max(1, min(krylov_dim, op.dim))
    n_apply = 0
    best = (np.inf, None, None)
    for _ in range(max_restarts):
        V, H, k = _arnoldi_cycle(op, v, m)
        n_apply += k
        evals, evecs = np.linalg.eig(H[:k, :k])
        i = int(np.argmax(np.abs(evals)))
        lam = evals[i]
        y = evecs[:, i]
        x = y @ V[:k]
        x /= np.linalg.norm(x)
        Ax = op(x)
        n_apply += 1
        lam = np.vdot(x, Ax)
        res = np.linalg.norm(Ax - lam * x)
        if res < best[0]:
            best = (res, lam, x)
        if res <= tol * max(abs(lam), 1e-300):
            return lam, x, n_apply
        v = x
    raise ConvergenceError(
        "arnoldi_dominant did not converge", best[0] / max(abs(best[1]), 1e-300),
        result=(best[1], best[2], n_apply),
    )


def gmres_solve(op, rhs, x0=None, krylov_dim=4, tol=1e-12, max_restarts=500):
    """Restarted GMRES for ``op(x) = rhs``.

    Returns ``(x, n_apply)``. The residual is relative to ``||rhs||``.
    """
    b = np.asarray(rhs, dtype=complex).ravel()
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=complex).ravel()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), 0
    m = max(1, min(krylov_dim, op.dim))
    n_apply = 0
    r = b - op(x)
    n_apply += 1
    best = (np.linalg.norm(r) / bnorm, x)
    for _ in range(max_restarts):
        beta = np.linalg.norm(r)
        if beta <= tol * bnorm:
            return x, n_apply
        V, H, k = _arnoldi_cycle(op, r / beta, m)
        n_apply += k
        e1 = np.zeros(H.shape[0], dtype=complex)
        e1[0] = beta
        y = np.linalg.lstsq(H, e1, rcond=None)[0]
        x = x + y @ V[:k]
        r = b - op(x)
        n_apply += 1
        rel = np.linalg.norm(r) / bnorm
        if rel < best[0]:
            best = (rel, x)
    if best[0] <= tol:
        return best[1], n_apply
    raise ConvergenceError("gmres_solve did not converge", best[0], result=best[1])


@functools.lru_cache(maxsize=512)
def _expression(subscripts, shapes):
    return opt_einsum.contract_expression(subscripts, *shapes, optimize="optimal")


def contract(subscripts: str, *operands):
    """Einsum with a contraction path cached per (subscripts, shapes)."""
    shapes = tuple(op.shape for op in operands)
    return _expression(subscripts, shapes)(*operands)

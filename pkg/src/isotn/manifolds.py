"""Geometry of complex Stiefel and Grassmann manifolds.

A point is an isometry ``W`` (``W^dagger W = 1``). Tangent vectors are kept in
factored form ``X = W A + Z`` with ``A`` skew-hermitian (zero on Grassmann)
and ``W^dagger Z = 0``; the orthogonal complement of ``W`` is never formed.
The metric is the Euclidean one, ``g(X, Y) = Re Tr[X^dagger Y]``, and
retraction and transport both use the unitary flow ``exp(alpha Q_X)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import ShapeError, eigh, expm_skew, make_rng, polar, qr_thin, solve_sylvester_hpd, svd

__all__ = [
    "Kind",
    "IsometryPoint",
    "Tangent",
    "ProductPoint",
    "ProductTangent",
    "project",
    "metric",
    "retract",
    "transport",
    "precondition",
    "random_point",
    "random_tangent",
    "product_project",
    "product_metric",
    "product_retract",
    "product_transport",
    "product_precondition",
]

ISOMETRY_TOL = 1e-10
POLISH_TOL = 1e-12


class Kind(str, enum.Enum):
    STIEFEL = "stiefel"
    GRASSMANN = "grassmann"


def _skew(M):
    return 0.5 * (M - M.conj().T)


class IsometryPoint:
    """An ``n x p`` isometry tagged with the manifold it lives on.

    ``n == p`` Stiefel points are unitaries.
    """

    __slots__ = ("W", "kind")

    def __init__(self, W, kind=Kind.STIEFEL, check=True):
        W = np.asarray(W, dtype=complex)
        if W.ndim != 2:
            raise ShapeError("an isometry must be a matrix")
        n, p = W.shape
        if n < p:
            raise ShapeError(f"isometry needs n >= p, got {n}x{p}")
        self.W = W
        self.kind = Kind(kind)
        if check:
            drift = self.drift()
            if drift > ISOMETRY_TOL:
                raise ValueError(f"matrix is not isometric (drift {drift:.2e})")

    @property
    def shape(self):
        return self.W.shape

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def p(self):
        return self.W.shape[1]

    def drift(self) -> float:
        p = self.W.shape[1]
        return float(np.linalg.norm(self.W.conj().T @ self.W - np.eye(p)))

    def polished(self) -> "IsometryPoint":
        """Return the nearest isometry if the drift exceeds ``POLISH_TOL``."""
        if self.drift() <= POLISH_TOL:
            return self
        Q = polar(self.W)[0]
        return IsometryPoint(Q, self.kind, check=False)

    def __repr__(self):
        n, p = self.shape
        return f"IsometryPoint({self.kind.value}, {n}x{p})"


class Tangent:
    """Tangent vector ``W A + Z`` at ``base``.

    For Grassmann points ``A`` is ``None`` (identically zero).
    """

    __slots__ = ("base", "A", "Z")

    def __init__(self, base: IsometryPoint, A, Z):
        self.base = base
        if base.kind is Kind.GRASSMANN:
            A = None
        elif A is None:
            A = np.zeros((base.p, base.p), dtype=complex)
        self.A = A
        self.Z = Z

    @classmethod
    def zeros(cls, base: IsometryPoint) -> "Tangent":
        return cls(base, None, np.zeros(base.shape, dtype=complex))

    def materialize(self):
        """Dense ``n x p`` matrix of the tangent vector."""
        if self.A is None:
            return self.Z.copy()
        return self.base.W @ self.A + self.Z

    def norm(self) -> float:
        return math.sqrt(max(metric(self, self), 0.0))

    def _combine(self, other, a, b):
        _check_same_base(self, other)
        A = None if self.A is None else a * self.A + b * other.A
        return Tangent(self.base, A, a * self.Z + b * other.Z)

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def __mul__(self, c):
        c = float(c)
        return Tangent(self.base, None if self.A is None else c * self.A, c * self.Z)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def axpy(self, c, other):
        """``self + c * other``."""
        return self._combine(other, 1.0, float(c))


def _check_same_base(X: Tangent, Y: Tangent):
    if X.base is Y.base:
        return
    if X.base.shape != Y.base.shape or not np.array_equal(X.base.W, Y.base.W):
        raise ValueError("tangent vectors live at different base points")


def project(W: IsometryPoint, D) -> Tangent:
    """Orthogonal projection of an ambient matrix onto the tangent space."""
    D = np.asarray(D, dtype=complex)
    if D.shape != W.shape:
        raise ShapeError(f"shape mismatch: point {W.shape}, matrix {D.shape}")
    WD = W.W.conj().T @ D
    Z = D - W.W @ WD
    if W.kind is Kind.GRASSMANN:
        return Tangent(W, None, Z)
    return Tangent(W, _skew(WD), Z)


def metric(X: Tangent, Y: Tangent) -> float:
    """Euclidean metric ``Re Tr[X^dagger Y]`` evaluated in factored form."""
    _check_same_base(X, Y)
    val = np.vdot(X.Z, Y.Z).real
    if X.A is not None:
        val += np.vdot(X.A, Y.A).real
    return float(val)


class _Flow:
    """The unitary ``exp(alpha Q_X)`` restricted to its invariant subspace."""

    def __init__(self, W: IsometryPoint, X: Tangent, alpha: float):
        if not math.isfinite(alpha):
            raise ValueError("step size must be finite")
        if X.base is not W:
            _check_same_base(X, Tangent.zeros(W))
        self.W = W
        self.alpha = alpha
        n, p = W.shape
        Wm = W.W
        if W.kind is Kind.GRASSMANN:
            U, S, V = svd(X.Z)
            self.mode = "grassmann"
            self.U, self.V = U, V
            self.cos = np.cos(alpha * S)
            self.sin = np.sin(alpha * S)
            WV = Wm @ V
            self.WV = WV
            self.new_W = (WV * self.cos) @ V.conj().T + (U * self.sin) @ V.conj().T
        else:
            self.mode = "stiefel"
            k = min(p, n - p)
            if k > 0:
                Q, _ = qr_thin(np.hstack([Wm, X.Z]))
                Qp = Q[:, p : p + k]
                B = Qp.conj().T @ X.Z
            else:
                Qp = np.zeros((n, 0), dtype=complex)
                B = np.zeros((0, p), dtype=complex)
            self.basis = np.hstack([Wm, Qp])
            self.Qp = Qp
            M = np.zeros((p + k, p + k), dtype=complex)
            M[:p, :p] = X.A
            M[p:, :p] = B
            M[:p, p:] = -B.conj().T
            self.E = expm_skew(alpha * M)
            self.new_W = self.basis @ self.E[:, :p]
        self.new_point = IsometryPoint(self.new_W, W.kind, check=False).polished()

    def apply(self, Y) -> np.ndarray:
        """Dense ``exp(alpha Q_X) Y`` for an ``n x p`` matrix ``Y``."""
        if self.mode == "grassmann":
            WV, U = self.WV, self.U
            a = WV.conj().T @ Y
            b = U.conj().T @ Y
            c1 = self.cos - 1.0
            return (
                Y
                + WV @ (c1[:, None] * a - self.sin[:, None] * b)
                + U @ (self.sin[:, None] * a + c1[:, None] * b)
            )
        coeff = self.basis.conj().T @ Y
        rest = Y - self.basis @ coeff
        return self.basis @ (self.E @ coeff) + rest

    def tangent(self, Y: Tangent) -> Tangent:
        """Transport ``Y`` and re-express it at the end point."""
        T = self.apply(Y.materialize())
        Wn = self.new_point.W
        WT = Wn.conj().T @ T
        Z = T - Wn @ WT
        if self.new_point.kind is Kind.GRASSMANN:
            return Tangent(self.new_point, None, Z)
        return Tangent(self.new_point, _skew(WT), Z)


def retract(W: IsometryPoint, X: Tangent, alpha: float):
    """Move along ``exp(alpha Q_X) W``.

    Returns the end point and the velocity of the curve there.
    """
    if alpha == 0:
        return W, X
    flow = _Flow(W, X, float(alpha))
    return flow.new_point, flow.tangent(X)


def transport(Y: Tangent, W: IsometryPoint, X: Tangent, alpha: float) -> Tangent:
    """Carry ``Y`` along the retraction of ``W`` in direction ``X``."""
    _check_same_base(Y, X)
    if alpha == 0:
        return Y
    return _Flow(W, X, float(alpha)).tangent(Y)


def _regularized_eig(rho, delta):
    lam, U = eigh(rho)
    if delta:
        lam = np.sqrt(lam**2 + delta**2)
    return lam, U


def precondition(X: Tangent, rho, delta: float = 0.0) -> Tangent:
    """Solve ``Re Tr[Y^dagger Xt rho] = Re Tr[Y^dagger X]`` for ``Xt``.

    ``rho`` is replaced by ``(rho^2 + delta^2)^(1/2)`` in both the inverse and
    the Sylvester problem.
    """
    rho = np.asarray(rho, dtype=complex)
    p = X.base.p
    if rho.shape != (p, p):
        raise ShapeError(f"rho must be {p}x{p}, got {rho.shape}")
    lam, U = _regularized_eig(rho, delta)
    if np.any(lam <= 0):
        raise np.linalg.LinAlgError("preconditioner density is singular")
    Zt = ((X.Z @ U) / lam) @ U.conj().T
    if X.A is None:
        return Tangent(X.base, None, Zt)
    At = solve_sylvester_hpd(None, X.A, eig=(lam, U))
    return Tangent(X.base, _skew(At), Zt)


def random_point(n: int, p: int, kind=Kind.STIEFEL, seed=None) -> IsometryPoint:
    """Haar-like random isometry from the QR of a complex Gaussian matrix."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    G = rng.standard_normal((n, p)) + 1j * rng.standard_normal((n, p))
    return IsometryPoint(qr_thin(G)[0], kind, check=False)


def random_tangent(W: IsometryPoint, seed=None) -> Tangent:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    n, p = W.shape
    G = rng.standard_normal((n, p)) + 1j * rng.standard_normal((n, p))
    return project(W, G)


class ProductPoint(tuple):
    """Ordered tuple of :class:`IsometryPoint` factors."""

    def __new__(cls, points: Sequence[IsometryPoint]):
        return super().__new__(cls, points)


class ProductTangent(tuple):
    """Ordered tuple of :class:`Tangent` factors with vector-space operations."""

    def __new__(cls, tangents: Sequence[Tangent]):
        return super().__new__(cls, tangents)

    def __add__(self, other):
        return ProductTangent([a + b for a, b in zip(self, other, strict=True)])

    def __sub__(self, other):
        return ProductTangent([a - b for a, b in zip(self, other, strict=True)])

    def __mul__(self, c):
        return ProductTangent([c * a for a in self])

    __rmul__ = __mul__

    def __neg__(self):
        return ProductTangent([-a for a in self])

    def axpy(self, c, other):
        return ProductTangent([a.axpy(c, b) for a, b in zip(self, other, strict=True)])

    def norm(self) -> float:
        return math.sqrt(max(product_metric(self, self), 0.0))

    @property
    def base(self):
        return ProductPoint([t.base for t in self])

    @classmethod
    def zeros(cls, x: ProductPoint):
        return cls([Tangent.zeros(w) for w in x])


def product_project(x: ProductPoint, Ds) -> ProductTangent:
    return ProductTangent([project(w, D) for w, D in zip(x, Ds, strict=True)])


def product_metric(X: ProductTangent, Y: ProductTangent) -> float:
    """Sum of factor metrics, accumulated left to right."""
    total = 0.0
    for a, b in zip(X, Y, strict=True):
        total += metric(a, b)
    return total


def product_retract(x: ProductPoint, X: ProductTangent, alpha: float):
    points, vels = [], []
    for w, t in zip(x, X, strict=True):
        w2, t2 = retract(w, t, alpha)
        points.append(w2)
        vels.append(t2)
    return ProductPoint(points), ProductTangent(vels)


class ProductFlow:
    """Cached retraction of a product point; transports any number of tangents.

    Building the flow once per accepted step keeps L-BFGS history transport
    at one factorization per factor.
    """

    def __init__(self, x: ProductPoint, X: ProductTangent, alpha: float):
        self.alpha = float(alpha)
        self.flows = None if alpha == 0 else [_Flow(w, t, alpha) for w, t in zip(x, X, strict=True)]
        self.start = x
        self.end = x if alpha == 0 else ProductPoint([f.new_point for f in self.flows])

    def __call__(self, Y: ProductTangent) -> ProductTangent:
        if self.flows is None:
            return Y
        return ProductTangent([f.tangent(y) for f, y in zip(self.flows, Y, strict=True)])


def product_transport(Y: ProductTangent, x: ProductPoint, X: ProductTangent, alpha: float):
    return ProductTangent(
        [transport(y, w, t, alpha) for y, w, t in zip(Y, x, X, strict=True)]
    )


def product_precondition(X: ProductTangent, rhos, deltas) -> ProductTangent:
    if np.isscalar(deltas):
        deltas = [deltas] * len(X)
    return ProductTangent(
        [precondition(t, r, d) for t, r, d in zip(X, rhos, deltas, strict=True)]
    )

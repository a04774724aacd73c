"""Uniform left-canonical MPS and MPO energy environments.

The MPS tensor ``A[s, a, b]`` (physical, left, right) is stored as the
isometry ``A.reshape(d * D, D)``; left-canonical form is exactly
``W^dagger W = 1`` for that matrix. Right multiplication by a unitary is
treated as gauge, so the point lives on the Grassmann manifold.

MPO tensors ``W[a, b, s, t]`` are lower triangular in the bond indices
(``W[a, b] = 0`` for ``a < b``). The left boundary vector selects bond
``chi - 1`` and the right boundary selects bond ``0``; both diagonal corners
are identities. See ``docs/mps_environments.md`` for the derivation of the
environment equations solved here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg
from .linalg import LinearOperator, arnoldi_dominant, gmres_solve, make_rng
from .manifolds import IsometryPoint, Kind, ProductTangent, Tangent, project, random_point

__all__ = [
    "UniformMps",
    "MpoHamiltonian",
    "Environments",
    "MpsContext",
    "tfim_mpo",
    "identity_mpo",
    "load_mpo_json",
    "right_fixed_point",
    "mpo_environments",
    "mps_energy",
    "mps_gradient",
    "mps_preconditioner",
    "mps_problem",
    "optimize_mps",
    "random_mps",
]

_ZERO_TOL = 1e-15


@dataclass
class UniformMps:
    A: IsometryPoint
    d: int
    D: int

    def __post_init__(self):
        if self.A.shape != (self.d * self.D, self.D):
            raise linalg.ShapeError(f"expected a {self.d * self.D}x{self.D} isometry, got {self.A.shape}")
        if self.A.kind is not Kind.GRASSMANN:
            raise ValueError("uniform MPS tensors live on the Grassmann manifold")

    @property
    def tensor(self) -> np.ndarray:
        return self.A.W.reshape(self.d, self.D, self.D)

    @classmethod
    def from_tensor(cls, A3) -> "UniformMps":
        A3 = np.asarray(A3, dtype=complex)
        d, D, D2 = A3.shape
        if D != D2:
            raise linalg.ShapeError("MPS tensor must have equal left and right bond dimension")
        return cls(IsometryPoint(A3.reshape(d * D, D), Kind.GRASSMANN), d, D)


@dataclass
class MpoHamiltonian:
    """Lower-triangular MPO ``W[a, b, s, t]`` with identity corners."""

    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=complex)
        if W.ndim != 4 or W.shape[0] != W.shape[1] or W.shape[2] != W.shape[3]:
            raise linalg.ShapeError("MPO tensor must have shape (chi, chi, d, d)")
        if not np.all(np.isfinite(W)):
            raise ValueError("MPO entries must be finite")
        chi, _, d, _ = W.shape
        eye = np.eye(d)
        if not (np.allclose(W[0, 0], eye) and np.allclose(W[-1, -1], eye)):
            raise ValueError("MPO corners W[0,0] and W[chi-1,chi-1] must be identities")
        for a in range(chi):
            for b in range(a + 1, chi):
                if np.any(np.abs(W[a, b]) > _ZERO_TOL):
                    raise ValueError("MPO must be lower triangular in its bond indices")
        self.W = W

    @property
    def chi(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[2]


@dataclass
class Environments:
    HL: np.ndarray  # (chi, D, D), HL[a][bra, ket]
    HR: np.ndarray  # (chi, D, D), HR[a][ket, bra]
    r: np.ndarray
    e: float


PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def tfim_mpo(g: float) -> MpoHamiltonian:
    """``H = -sum X_i X_{i+1} - g sum Z_i`` with bond dimension 3."""
    W = np.zeros((3, 3, 2, 2), dtype=complex)
    W[0, 0] = np.eye(2)
    W[1, 0] = PAULI_X
    W[2, 0] = -g * PAULI_Z
    W[2, 1] = -PAULI_X
    W[2, 2] = np.eye(2)
    return MpoHamiltonian(W)


def identity_mpo(d: int = 2) -> MpoHamiltonian:
    """The two-state MPO of ``sum_i 1``; its energy density is one."""
    W = np.zeros((2, 2, d, d), dtype=complex)
    W[0, 0] = W[1, 0] = W[1, 1] = np.eye(d)
    return MpoHamiltonian(W)


def load_mpo_json(path) -> MpoHamiltonian:
    """Read an MPO from JSON.

    Format: ``{"chi": 3, "d": 2, "entries": [{"a": 1, "b": 0, "re": [[..]], "im": [[..]]}]}``.
    Omitted ``im`` means zero; unlisted blocks are zero.
    """
    data = json.loads(Path(path).read_text())
    chi, d = int(data["chi"]), int(data["d"])
    W = np.zeros((chi, chi, d, d), dtype=complex)
    for ent in data["entries"]:
        block = np.asarray(ent["re"], dtype=float)
        if "im" in ent:
            block = block + 1j * np.asarray(ent["im"], dtype=float)
        if block.shape != (d, d):
            raise linalg.ShapeError(f"MPO block ({ent['a']},{ent['b']}) must be {d}x{d}")
        W[int(ent["a"]), int(ent["b"])] = block
    return MpoHamiltonian(W)


def random_mps(d: int, D: int, seed=None) -> UniformMps:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return UniformMps(random_point(d * D, D, Kind.GRASSMANN, rng), d, D)


def _left_map(A3, O, L):
    """``sum_{s,t} O[s,t] A^s^dagger L A^t``."""
    return np.einsum("st,sab,ac,tcd->bd", O, A3.conj(), L, A3, optimize=True)


def _right_map(A3, O, R):
    """``sum_{s,t} O[s,t] A^t R A^s^dagger``."""
    return np.einsum("st,tab,bc,sdc->ad", O, A3, R, A3.conj(), optimize=True)


def _hermitize(M):
    return 0.5 * (M + M.conj().T)


def right_fixed_point(A: UniformMps | IsometryPoint, r0=None, krylov_dim=4, tol=1e-12,
                      max_restarts=2000):
    """Dominant fixed point ``r`` of ``T(r) = sum_s A^s r A^s^dagger``; ``Tr r = 1``."""
    mps = A if isinstance(A, UniformMps) else UniformMps(A, A.n // A.p, A.p)
    A3, D = mps.tensor, mps.D
    if r0 is None:
        r0 = np.eye(D, dtype=complex) / D

    def apply(v):
        R = v.reshape(D, D)
        return np.einsum("sab,bc,sdc->ad", A3, R, A3.conj(), optimize=True).ravel()

    lam, v, _ = arnoldi_dominant(LinearOperator(D * D, apply), r0, krylov_dim, tol, max_restarts)
    if abs(lam - 1) > 1e-10:
        raise linalg.ConvergenceError("transfer matrix dominant eigenvalue is not one", abs(lam - 1))
    r = v.reshape(D, D)
    r = _hermitize(r / np.trace(r))
    lam_r, U = linalg.eigh(r)
    lam_r = np.clip(lam_r, 0.0, None)
    r = (U * lam_r) @ U.conj().T
    return _hermitize(r / np.trace(r).real)


def mpo_environments(mps: UniformMps, mpo: MpoHamiltonian, r=None, guess: Environments | None = None,
                     krylov_dim=30, tol=1e-12, max_restarts=2000) -> Environments:
    """Left and right energy blocks and the energy density.

    The identity-corner blocks diverge linearly with system size; their
    extensive part is removed by projecting out the fixed-point direction,
    which leaves ``e`` as the energy per site.
    """
    if mpo.d != mps.d:
        raise linalg.ShapeError("MPO and MPS physical dimensions differ")
    A3, D, chi, W = mps.tensor, mps.D, mpo.chi, mpo.W
    if r is None:
        r = right_fixed_point(mps, None if guess is None else guess.r, krylov_dim, tol, max_restarts)
    eye = np.eye(D, dtype=complex)
    n = D * D

    def solve(apply, rhs, x0):
        op = LinearOperator(n, lambda v: apply(v.reshape(D, D)).ravel())
        x, _ = gmres_solve(op, rhs.ravel(), None if x0 is None else x0.ravel(), krylov_dim, tol, max_restarts)
        return x.reshape(D, D)

    e = 0.0  # a bond-dimension-one MPO is the identity and carries no energy
    HL = np.zeros((chi, D, D), dtype=complex)
    HL[chi - 1] = eye
    for b in range(chi - 2, -1, -1):
        Y = sum((_left_map(A3, W[a, b], HL[a]) for a in range(b + 1, chi)
                 if np.any(W[a, b] != 0)), np.zeros((D, D), dtype=complex))
        x0 = None if guess is None else guess.HL[b]
        if b == 0:
            e = np.trace(Y @ r)
            HL[0] = solve(lambda L: L - _left_map(A3, W[0, 0], L) + np.trace(L @ r) * eye, Y - e * eye, x0)
        elif np.any(W[b, b] != 0):
            HL[b] = solve(lambda L, _O=W[b, b]: L - _left_map(A3, _O, L), Y, x0)
        else:
            HL[b] = Y

    HR = np.zeros((chi, D, D), dtype=complex)
    HR[0] = r
    for b in range(1, chi):
        Y = sum((_right_map(A3, W[b, c], HR[c]) for c in range(b) if np.any(W[b, c] != 0)),
                np.zeros((D, D), dtype=complex))
        x0 = None if guess is None else guess.HR[b]
        if b == chi - 1:
            eR = np.trace(Y)
            HR[b] = solve(lambda R: R - _right_map(A3, W[b, b], R) + r * np.trace(R), Y - eR * r, x0)
        elif np.any(W[b, b] != 0):
            HR[b] = solve(lambda R, _O=W[b, b]: R - _right_map(A3, _O, R), Y, x0)
        else:
            HR[b] = Y
    return Environments(HL, HR, r, float(np.real(e)))


def mps_energy(mps: UniformMps, mpo: MpoHamiltonian) -> float:
    return mpo_environments(mps, mpo).e


def mps_environment(mps: UniformMps, mpo: MpoHamiltonian, envs: Environments) -> np.ndarray:
    """``2 de/dA^*`` reshaped as a ``(d*D, D)`` matrix."""
    A3, W = mps.tensor, mpo.W
    G = np.einsum("xab,xyst,tbc,ycd->sad", envs.HL, W, A3, envs.HR, optimize=True)
    return 2.0 * G.reshape(mps.d * mps.D, mps.D)


def mps_gradient(mps: UniformMps, mpo: MpoHamiltonian, envs: Environments | None = None) -> Tangent:
    envs = envs or mpo_environments(mps, mpo)
    return project(mps.A, mps_environment(mps, mpo, envs))


def mps_preconditioner(X: Tangent, r, delta: float | None = None) -> Tangent:
    """``Z -> Z (r + delta 1)^{-1}`` with ``delta = g(X, X)`` unless given."""
    if delta is None:
        delta = X.norm() ** 2
    D = r.shape[0]
    lam, U = linalg.eigh(r)
    lam = lam + delta
    if np.any(lam <= 0):
        raise linalg.SingularSylvesterError("regularized density is not positive definite")
    inv = (U / lam) @ U.conj().T
    return Tangent(X.base, None, X.Z @ inv)


class MpsContext:
    """Warm starts for ``r`` and the energy blocks across evaluations."""

    def __init__(self, mpo: MpoHamiltonian, krylov_dim=30, tol=1e-12):
        self.mpo = mpo
        self.krylov_dim = krylov_dim
        self.tol = tol
        self.envs: Environments | None = None
        self.grad_norm = None
        self._last = None

    def environments(self, mps: UniformMps) -> Environments:
        guess = self.envs if self.envs is not None and self.envs.r.shape[0] == mps.D else None
        envs = mpo_environments(mps, self.mpo, guess=guess, krylov_dim=self.krylov_dim, tol=self.tol)
        self.envs = envs
        self._last = (mps.A.W, envs)
        return envs

    def cached(self, W):
        if self._last is not None and (self._last[0] is W or np.array_equal(self._last[0], W)):
            return self._last[1]
        return None


def mps_problem(mpo: MpoHamiltonian, d: int, D: int, context: MpsContext | None = None,
                use_preconditioner=True):
    """Optimization problem on the one-factor product manifold."""
    from .optimize import Problem

    ctx = context or MpsContext(mpo)

    def evaluate(x):
        mps = UniformMps(x[0], d, D)
        envs = ctx.environments(mps)
        G = project(x[0], mps_environment(mps, mpo, envs))
        ctx.grad_norm = G.norm()
        return envs.e, ProductTangent([G])

    def precond(x, X):
        # one operator per iterate: delta comes from the gradient, not from X
        envs = ctx.cached(x[0].W)
        if envs is None:
            envs = ctx.environments(UniformMps(x[0], d, D))
            delta = None
        else:
            delta = ctx.grad_norm**2
        return ProductTangent([mps_preconditioner(X[0], envs.r, delta)])

    problem = Problem(evaluate, precond if use_preconditioner else None)
    problem.context = ctx
    return problem


def optimize_mps(mpo: MpoHamiltonian, D: int, options=None, seed=None, initial: UniformMps | None = None,
                 use_preconditioner=True, ls_params=None):
    """Minimize the energy density; returns ``(UniformMps, OptimizeResult)``."""
    from .manifolds import ProductPoint
    from .optimize import minimize

    mps0 = initial or random_mps(mpo.d, D, seed)
    problem = mps_problem(mpo, mpo.d, D, use_preconditioner=use_preconditioner)
    result = minimize(problem, ProductPoint([mps0.A]), options, ls_params)
    return UniformMps(result.x[0], mpo.d, D), result

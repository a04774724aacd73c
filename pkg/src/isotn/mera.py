"""Scale-invariant ternary MERA on an infinite chain.

Tensor conventions (row-major reshapes, bottom indices first):

* disentangler ``u[i, j, x, y]``: bottom legs ``i, j``, top legs ``x, y``;
  as a matrix ``u.reshape(D**2, D**2)``, a Stiefel point with ``n == p``.
* isometry ``w[a, b, c, t]``: three bottom legs, one top leg; as a matrix
  ``w.reshape(D_in**3, D_out)``, a Grassmann point.
* two-site operators ``h[i1, i2, j1, j2]`` with ``(i1, i2)`` the output
  (row) pair; density matrices likewise, so ``Tr[h rho]`` pairs ``h``'s
  columns with ``rho``'s rows.

Within a layer, block ``k`` of three fine sites ``3k, 3k+1, 3k+2`` sits
under isometry ``k`` and a disentangler acts on every pair ``(3k+2, 3k+3)``.
A two-site operator on the fine lattice can start at three positions
relative to this pattern; the ascending superoperator averages the three, so
that the per-site energy ``Tr[h rho]`` is the same at every level.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import LinearOperator, arnoldi_dominant, contract, gmres_solve, make_rng, polar, qr_thin
from .manifolds import (
    IsometryPoint,
    Kind,
    ProductPoint,
    ProductTangent,
    Tangent,
    precondition,
    project,
    random_point,
)

__all__ = [
    "MeraLayer",
    "MeraState",
    "MeraContext",
    "ising_hamiltonian",
    "ascend",
    "descend",
    "fixed_point_density",
    "scale_invariant_hamiltonian",
    "energy",
    "environments",
    "gradient",
    "preconditioner_densities",
    "mera_preconditioner",
    "evenbly_vidal_step",
    "ev_tensor_update",
    "grow_bond_dimension",
    "random_mera",
    "mera_problem",
]

log = logging.getLogger(__name__)

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)

# Einsum strings for the closed network Tr[A_pos(h) rho] at each position.
_POSITIONS = {
    "left": dict(w1c="abxT", w2c="yzfU", uc="ijxy", h="jzkZ", u="ikXY", w1="abXS", w2="YZfR", rho="SRTU"),
    "center": dict(w1c="abcT", w2c="defU", uc="ijcd", h="ijkl", u="klCD", w1="abCS", w2="DefR", rho="SRTU"),
    "right": dict(w1c="azxT", w2c="yefU", uc="ijxy", h="ziZk", u="kjXY", w1="aZXS", w2="YefR", rho="SRTU"),
}
_NAMES = ("w1c", "w2c", "uc", "h", "u", "w1", "w2", "rho")


def _swap_halves(s):
    return s[2:] + s[:2]


def _layer_sum(operands, drop, out):
    """Average over positions of the network with the ``drop`` operands removed.

    ``drop`` names one operand per term; ``out`` maps a position's subscript
    table to the output subscripts.
    """
    total = None
    for subs in _POSITIONS.values():
        for name in drop:
            names = [k for k in _NAMES if k != name]
            expr = ",".join(subs[k] for k in names) + "->" + out(subs, name)
            term = contract(expr, *(operands[k] for k in names))
            total = term if total is None else total + term
    return total / 3.0


@dataclass
class MeraLayer:
    """Disentangler (Stiefel) and isometry (Grassmann) of one layer."""

    u: IsometryPoint
    w: IsometryPoint

    def __post_init__(self):
        d_in = self.d_in
        if self.u.shape != (d_in**2, d_in**2):
            raise linalg.ShapeError(f"disentangler must be {d_in**2}x{d_in**2}, got {self.u.shape}")

    @property
    def d_in(self) -> int:
        return int(round(self.w.n ** (1 / 3)))

    @property
    def d_out(self) -> int:
        return self.w.p

    def tensors(self):
        D, Do = self.d_in, self.d_out
        return self.u.W.reshape(D, D, D, D), self.w.W.reshape(D, D, D, Do)

    def operands(self, h=None, rho=None):
        D, Do = self.d_in, self.d_out
        u4, w4 = self.tensors()
        ops = dict(w1c=w4.conj(), w2c=w4.conj(), uc=u4.conj(), u=u4, w1=w4, w2=w4)
        if h is not None:
            ops["h"] = np.asarray(h).reshape(D, D, D, D)
        if rho is not None:
            ops["rho"] = np.asarray(rho).reshape(Do, Do, Do, Do)
        return ops


@dataclass
class MeraState:
    """Transition layers (bottom-up) plus one scale-invariant layer."""

    transition_layers: list
    si_layer: MeraLayer
    d_phys: int

    def __post_init__(self):
        d = self.d_phys
        for layer in self.layers:
            if layer.d_in != d:
                raise linalg.ShapeError("bond dimensions of consecutive layers do not chain")
            d = layer.d_out
        if self.si_layer.d_in != self.si_layer.d_out:
            raise linalg.ShapeError("scale-invariant layer must have equal in/out dimension")

    @property
    def layers(self):
        return list(self.transition_layers) + [self.si_layer]

    @property
    def bond_dimension(self):
        return self.si_layer.d_out

    def to_point(self) -> ProductPoint:
        pts = []
        for layer in self.layers:
            pts += [layer.u, layer.w]
        return ProductPoint(pts)

    @classmethod
    def from_point(cls, x, d_phys) -> "MeraState":
        layers = [MeraLayer(x[2 * i], x[2 * i + 1]) for i in range(len(x) // 2)]
        return cls(layers[:-1], layers[-1], d_phys)


def ising_hamiltonian(g: float = 1.0):
    """Two-site term of ``H = -sum X X - g sum Z``; the field is split evenly."""
    eye = np.eye(2)
    h = -np.kron(PAULI_X, PAULI_X) - 0.5 * g * (np.kron(PAULI_Z, eye) + np.kron(eye, PAULI_Z))
    return h.astype(complex)


def _pair(x, rho):
    """``Tr[x rho]`` for two matrices."""
    return np.sum(x * rho.T)


def ascend(h, layer: MeraLayer):
    """Raise a two-site operator through one layer (average of three positions)."""
    D, Do = layer.d_in, layer.d_out
    h = np.asarray(h, dtype=complex)
    if h.shape != (D * D, D * D):
        raise linalg.ShapeError(f"operator must be {D*D}x{D*D} for this layer, got {h.shape}")
    ops = layer.operands(h=h)
    ops["rho"] = None
    out = _layer_sum(ops, ("rho",), lambda s, _: "TUSR")
    return out.reshape(Do * Do, Do * Do)


def descend(rho, layer: MeraLayer):
    """Lower a two-site density matrix through one layer; adjoint of ascend."""
    D, Do = layer.d_in, layer.d_out
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (Do * Do, Do * Do):
        raise linalg.ShapeError(f"density must be {Do*Do}x{Do*Do} for this layer, got {rho.shape}")
    ops = layer.operands(rho=rho)
    ops["h"] = None
    out = _layer_sum(ops, ("h",), lambda s, _: _swap_halves(s["h"]))
    return out.reshape(D * D, D * D)


def layer_energy(h, rho, layer: MeraLayer) -> float:
    return float(_pair(ascend(h, layer), rho).real)


def layer_environments(h, rho, layer: MeraLayer):
    """Partial derivatives ``2 dC/du*`` and ``2 dC/dw*`` of ``Tr[A(h) rho]``."""
    ops = layer.operands(h=h, rho=rho)
    Eu = _layer_sum(ops, ("uc",), lambda s, n: s[n])
    Ew = _layer_sum(ops, ("w1c", "w2c"), lambda s, n: s[n])
    return 2.0 * Eu.reshape(layer.u.shape), 2.0 * Ew.reshape(layer.w.shape)


def _hermitize(rho):
    return 0.5 * (rho + rho.conj().T)


def _normalize_density(rho):
    rho = _hermitize(rho)
    lam, U = linalg.eigh(rho)
    if np.sum(lam) < 0:
        lam = -lam
    lam = np.where(lam < 0, 0.0, lam)
    rho = (U * lam) @ U.conj().T
    return _hermitize(rho / np.trace(rho).real)


def one_site_density(rho2, D):
    r = rho2.reshape(D, D, D, D)
    left = np.einsum("abcb->ac", r)
    right = np.einsum("abad->bd", r)
    return _hermitize(0.5 * (left + right))


def disentangler_density(rho, layer: MeraLayer):
    """Density matrix on the two top legs of the disentangler."""
    D, Do = layer.d_in, layer.d_out
    u4, w4 = layer.tensors()
    r = contract("abCS,DefR,SRTU,abcT,defU->CDcd", w4, w4, rho.reshape(Do, Do, Do, Do), w4.conj(), w4.conj())
    return _hermitize(r.reshape(D * D, D * D))


class _Counter:
    def __init__(self):
        self.rho = 0
        self.hsum = 0


def fixed_point_density(si_layer: MeraLayer, rho0=None, krylov_dim=4, tol=1e-12,
                        max_restarts=2000, counter=None):
    """Fixed point of the descending superoperator of the scale-invariant layer."""
    D = si_layer.d_in
    dim = D**4
    if rho0 is None:
        rho0 = np.eye(D * D, dtype=complex) / (D * D)

    def apply(v):
        return descend(v.reshape(D * D, D * D), si_layer).ravel()

    lam, v, n = arnoldi_dominant(LinearOperator(dim, apply), rho0.ravel(), krylov_dim, tol, max_restarts)
    if counter is not None:
        counter.rho += n
    rho = v.reshape(D * D, D * D)
    rho = rho / np.trace(rho)
    return _normalize_density(rho)


def scale_invariant_hamiltonian(h, si_layer: MeraLayer, rho_ss, x0=None, krylov_dim=4,
                                tol=1e-12, max_restarts=2000, counter=None):
    """Regularized geometric sum of ``h`` ascended through the scale-invariant layer.

    Returns ``sum_i A'^i (h - e 1) + e 1`` with ``e = Tr[h rho_ss]`` and
    ``A'(x) = A(x) - Tr[x rho_ss] 1``; the identity part only shifts the
    cost by a constant and drops out of every projected gradient.
    """
    D = si_layer.d_in
    n = D * D
    eye = np.eye(n, dtype=complex)
    e = _pair(h, rho_ss)
    htilde = np.asarray(h, dtype=complex) - e * eye

    def apply(v):
        x = v.reshape(n, n)
        return (x - ascend(x, si_layer) + _pair(x, rho_ss) * eye).ravel()

    x, napp = gmres_solve(LinearOperator(n * n, apply), htilde.ravel(),
                          None if x0 is None else (np.asarray(x0) - e * eye).ravel(),
                          krylov_dim, tol, max_restarts)
    if counter is not None:
        counter.hsum += napp
    return _hermitize(x.reshape(n, n)) + e.real * eye


@dataclass
class MeraAnalysis:
    """Everything one evaluation computes: energy, operators, densities, environments."""

    energy: float
    hs: list  # h at each level 0..T (h[T] sits below the scale-invariant layer)
    rhos: list  # rho at each level 0..T (rho[T] is the fixed point)
    hsum: np.ndarray
    envs: list = field(default_factory=list)


class MeraContext:
    """Holds warm starts between evaluations of the same optimization."""

    def __init__(self, h_phys, krylov_dim=4, tol=1e-12):
        self.h_phys = np.asarray(h_phys, dtype=complex)
        self.krylov_dim = krylov_dim
        self.tol = tol
        self.rho_ss = None
        self.hsum = None
        self.counter = _Counter()
        self.grad_norms = None
        self._last = None

    def _warm(self, arr, shape):
        return arr if arr is not None and arr.shape == shape else None

    def analyse(self, mera: MeraState, with_envs=True, h=None) -> MeraAnalysis:
        h = self.h_phys if h is None else h
        layers = mera.layers
        si = mera.si_layer
        n = si.d_in**2
        rho_ss = fixed_point_density(si, self._warm(self.rho_ss, (n, n)), self.krylov_dim,
                                     self.tol, counter=self.counter)
        self.rho_ss = rho_ss
        hs = [h]
        for layer in mera.transition_layers:
            hs.append(ascend(hs[-1], layer))
        rhos = [rho_ss]
        for layer in reversed(mera.transition_layers):
            rhos.insert(0, descend(rhos[0], layer))
        e = float(_pair(hs[-1], rho_ss).real)
        hsum = None
        envs = []
        if with_envs:
            hsum = scale_invariant_hamiltonian(hs[-1], si, rho_ss, self._warm(self.hsum, (n, n)),
                                               self.krylov_dim, self.tol, counter=self.counter)
            self.hsum = hsum
            for l, layer in enumerate(layers):
                h_below = hs[l] if l < len(mera.transition_layers) else hsum
                envs.extend(layer_environments(h_below, rhos[min(l + 1, len(rhos) - 1)], layer))
        res = MeraAnalysis(e, hs, rhos, hsum, envs)
        self._last = (mera.to_point(), res)
        return res

    def densities(self, mera: MeraState, analysis: MeraAnalysis | None = None):
        """Trace-normalized densities on the top legs of every tensor."""
        a = analysis or self.analyse(mera, with_envs=False)
        out = []
        for l, layer in enumerate(mera.layers):
            rho = a.rhos[min(l + 1, len(a.rhos) - 1)]
            out.append(_normalize_density(disentangler_density(rho, layer)))
            out.append(_normalize_density(one_site_density(rho, layer.d_out)))
        return out

    def cached(self, x):
        """Analysis of the most recent evaluation if it was at ``x``."""
        if self._last is None:
            return None
        x_last, res = self._last
        if len(x_last) == len(x) and all(a is b or np.array_equal(a.W, b.W) for a, b in zip(x_last, x)):
            return res
        return None


def energy(mera: MeraState, h_phys) -> float:
    """Energy per site."""
    return MeraContext(h_phys).analyse(mera, with_envs=False).energy


def environments(mera: MeraState, h_phys, context: MeraContext | None = None):
    """Environments ``D_v = 2 dE/dv*`` in the order ``u1, w1, ..., u_si, w_si``."""
    ctx = context or MeraContext(h_phys)
    return ctx.analyse(mera, h=np.asarray(h_phys, dtype=complex)).envs


def gradient(mera: MeraState, h_phys, context: MeraContext | None = None) -> ProductTangent:
    x = mera.to_point()
    return ProductTangent([project(v, D) for v, D in zip(x, environments(mera, h_phys, context))])


def preconditioner_densities(mera: MeraState, context: MeraContext | None = None):
    ctx = context or MeraContext(np.zeros((mera.d_phys**2,) * 2))
    return ctx.densities(mera)


def mera_preconditioner(X: ProductTangent, densities, deltas=None) -> ProductTangent:
    """Per-tensor preconditioning, by default with ``delta_v = ||X_v||``.

    ``deltas`` overrides the regularization per tensor; the optimizer passes
    the gradient norms so that every vector preconditioned at one iterate
    sees the same operator.
    """
    if deltas is None:
        deltas = [t.norm() for t in X]
    return ProductTangent([precondition(t, rho, dl) if dl > 0 else t
                           for t, rho, dl in zip(X, densities, deltas, strict=True)])


def mera_problem(h_phys, d_phys, context: MeraContext | None = None, use_preconditioner=True):
    """Build an optimization :class:`~isotn.optimize.Problem` for the MERA energy."""
    from .optimize import Problem

    ctx = context or MeraContext(h_phys)

    def evaluate(x):
        mera = MeraState.from_point(x, d_phys)
        a = ctx.analyse(mera)
        G = ProductTangent([project(v, D) for v, D in zip(x, a.envs)])
        ctx.grad_norms = [t.norm() for t in G]
        return a.energy, G

    def precond(x, X):
        mera = MeraState.from_point(x, d_phys)
        a = ctx.cached(x)
        deltas = ctx.grad_norms if a is not None else None
        return mera_preconditioner(X, ctx.densities(mera, a), deltas)

    problem = Problem(evaluate, precond if use_preconditioner else None)
    problem.context = ctx
    return problem


def _unitary_rand(n, rng):
    G = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return qr_thin(G)[0]


def random_mera(d_phys, D, n_transition=2, seed=None, init="random") -> MeraState:
    """Random MERA with bond dimension ``D`` (capped by ``d_in**3`` per layer).

    ``init="identity"`` uses identity disentanglers with random isometries.
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    layers = []
    d_in = d_phys
    for _ in range(n_transition + 1):
        d_out = min(D, d_in**3)
        if init == "identity":
            u = IsometryPoint(np.eye(d_in**2, dtype=complex), Kind.STIEFEL)
        else:
            u = random_point(d_in**2, d_in**2, Kind.STIEFEL, rng)
        w = random_point(d_in**3, d_out, Kind.GRASSMANN, rng)
        layers.append(MeraLayer(u, w))
        d_in = d_out
    if layers[-1].d_in != layers[-1].d_out:
        raise ValueError("not enough transition layers to reach the requested bond dimension")
    return MeraState(layers[:-1], layers[-1], d_phys)


def ev_tensor_update(W: IsometryPoint, D, D_identity, gamma: float):
    """Evenbly-Vidal update of one tensor for the shifted cost ``H - gamma 1``.

    ``D`` and ``D_identity`` are the environments of ``H`` and of the identity.
    The tensor becomes the polar factor of ``-(D - gamma D_identity)``. If the
    shift does not make the hermitian part of ``W^dagger (gamma D_1 - D)``
    positive definite, gamma is raised to ``2 ||S|| / lambda_min``. Returns the
    new point and the gamma used.
    """
    Wm = W.W
    S = _hermitize(Wm.conj().T @ D)
    M1 = _hermitize(Wm.conj().T @ D_identity)
    lam1 = linalg.eigh(M1)[0]
    lam_min = max(lam1[0], 1e-12 * max(lam1[-1], 1e-300))
    if linalg.eigh(gamma * M1 - S)[0][0] <= 0:
        new_gamma = 2.0 * np.linalg.norm(S, 2) / lam_min
        warnings.warn(f"gamma {gamma:.3g} too small for this tensor; using {new_gamma:.3g}",
                      RuntimeWarning, stacklevel=2)
        gamma = new_gamma
    Q = polar(-(D - gamma * D_identity))[0]
    return IsometryPoint(Q, W.kind, check=False).polished(), gamma


def evenbly_vidal_step(mera: MeraState, h_phys, gamma=None, context: MeraContext | None = None):
    """One bottom-to-top sweep of Evenbly-Vidal updates (each ``u`` then ``w``).

    ``gamma=None`` shifts each layer by the largest eigenvalue of the local
    operator it sees, the usual choice that makes the shifted term negative
    semidefinite. A number applies the same shift to every tensor.
    """
    h = np.asarray(h_phys, dtype=complex)
    ctx = context or MeraContext(h)
    a = ctx.analyse(mera, with_envs=False)
    n = mera.si_layer.d_in**2
    hsum = scale_invariant_hamiltonian(a.hs[-1], mera.si_layer, a.rhos[-1],
                                       ctx._warm(ctx.hsum, (n, n)), ctx.krylov_dim, ctx.tol,
                                       counter=ctx.counter)
    ctx.hsum = hsum
    T = len(mera.transition_layers)
    new_layers = []
    h_below = h
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for l, layer in enumerate(mera.layers):
            rho = a.rhos[min(l + 1, T)]
            hb = h_below if l < T else hsum
            g_l = gamma if gamma is not None else float(linalg.eigh(hb)[0][-1]) + 1e-3
            eye = np.eye(layer.d_in**2, dtype=complex)
            Du, _ = layer_environments(hb, rho, layer)
            Du1, _ = layer_environments(eye, rho, layer)
            u, _ = ev_tensor_update(layer.u, Du, Du1, g_l)
            layer = MeraLayer(u, layer.w)
            _, Dw = layer_environments(hb, rho, layer)
            _, Dw1 = layer_environments(eye, rho, layer)
            w, _ = ev_tensor_update(layer.w, Dw, Dw1, g_l)
            layer = MeraLayer(u, w)
            new_layers.append(layer)
            if l < T:
                h_below = ascend(h_below, layer)
    return MeraState(new_layers[:-1], new_layers[-1], mera.d_phys)


def _embed_unitary(u_old, D_old, D_new, rng):
    """Embed ``u_old`` acting on the old two-leg subspace; random on the rest."""
    n_new = D_new**2
    idx = np.array([i * D_new + j for i in range(D_old) for j in range(D_old)], dtype=int)
    rest = np.setdiff1d(np.arange(n_new), idx)
    u = np.zeros((n_new, n_new), dtype=complex)
    u[np.ix_(idx, idx)] = u_old
    if rest.size:
        u[np.ix_(rest, rest)] = _unitary_rand(rest.size, rng)
    return u


def _embed_isometry(w_old, D_in_old, D_in_new, D_out_new, rng):
    D_out_old = w_old.shape[1]
    w4 = w_old.reshape(D_in_old, D_in_old, D_in_old, D_out_old)
    W = np.zeros((D_in_new,) * 3 + (D_out_new,), dtype=complex)
    W[:D_in_old, :D_in_old, :D_in_old, :D_out_old] = w4
    W = W.reshape(D_in_new**3, D_out_new)
    extra = D_out_new - D_out_old
    if extra:
        G = rng.standard_normal((D_in_new**3, extra)) + 1j * rng.standard_normal((D_in_new**3, extra))
        G *= 1e-4
        Q = qr_thin(np.hstack([W[:, :D_out_old], G]))[0]
        W[:, D_out_old:] = Q[:, D_out_old:]
    return W


def grow_bond_dimension(mera: MeraState, D_new: int, seed=None) -> MeraState:
    """Enlarge every bond to ``D_new`` (capped by ``d_in**3``) without changing the state.

    Old tensors are embedded in the enlarged spaces; the new blocks are
    random isometric completions, so the energy is unchanged up to rounding.
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    layers = []
    d_in_new = mera.d_phys
    for layer in mera.layers:
        d_in_old = layer.d_in
        d_out_new = max(layer.d_out, min(D_new, d_in_new**3))
        if d_in_new == d_in_old:
            u = layer.u.W
        else:
            u = _embed_unitary(layer.u.W, d_in_old, d_in_new, rng)
        w = _embed_isometry(layer.w.W, d_in_old, d_in_new, d_out_new, rng)
        layers.append(MeraLayer(IsometryPoint(u, Kind.STIEFEL).polished(),
                                IsometryPoint(w, Kind.GRASSMANN).polished()))
        d_in_new = d_out_new
    si = layers[-1]
    if si.d_in != si.d_out:
        raise ValueError("grown scale-invariant layer is not square; add transition layers")
    return MeraState(layers[:-1], si, mera.d_phys)


def run_evenbly_vidal(mera: MeraState, h_phys, max_sweeps=1000, grad_tol=1e-8, gamma=None,
                      callback=None, context: MeraContext | None = None):
    """Repeat :func:`evenbly_vidal_step` until the Riemannian gradient is small.

    One iteration is one full sweep. Returns ``(mera, trace, converged)``
    where ``trace`` holds :class:`~isotn.optimize.IterateRecord` entries with
    the energy and gradient norm before each sweep (and after the last one).
    """
    import time

    from .optimize import IterateRecord

    h = np.asarray(h_phys, dtype=complex)
    ctx = context or MeraContext(h)
    t0 = time.perf_counter()
    trace = []
    converged = False
    for it in range(max_sweeps + 1):
        a = ctx.analyse(mera)
        x = mera.to_point()
        gnorm = ProductTangent([project(v, D) for v, D in zip(x, a.envs)]).norm()
        rec = IterateRecord(it, a.energy, gnorm, 1.0 if it else 0.0, it, time.perf_counter() - t0)
        trace.append(rec)
        if callback:
            callback(rec, x)
        if gnorm <= grad_tol:
            converged = True
            break
        if it == max_sweeps:
            break
        mera = evenbly_vidal_step(mera, h, gamma, ctx)
    return mera, trace, converged

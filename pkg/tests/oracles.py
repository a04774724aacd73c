"""Dense reference implementations used as test oracles.

Nothing here calls the library's contraction code: the finite MERA is built
as an explicit state vector, and the uniform-MPS energy comes from dense
transfer-matrix eigenvectors.
"""

import numpy as np

X = np.array([[0, 1], [1, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)


def ising_two_site(g=1.0):
    eye = np.eye(2)
    return -np.kron(X, X) - 0.5 * g * (np.kron(Z, eye) + np.kron(eye, Z))


# ---------------------------------------------------------------- finite MERA
#
# Nine sites on a ring, one layer of three isometries w (blocks 012, 345, 678)
# and three disentanglers u on the pairs (2,3), (5,6), (8,0), topped by a
# three-site state tau. Letters: physical a..i, the u/w links A..F, top x, y, z.

_W = ("AbBx", "CeDy", "EhFz")
_U = ("cdBC", "fgDE", "iaFA")
_TAU = "xyz"
_PHYS = "abcdefghi"


def finite_state(u4, w4, tau):
    ops = [w4] * 3 + [u4] * 3 + [tau]
    subs = ",".join(_W + _U + (_TAU,))
    return np.einsum(subs + "->" + _PHYS, *ops, optimize=True)


def apply_bond(h4, psi, i):
    """Apply a two-site operator to sites ``(i, i+1 mod 9)``."""
    j = (i + 1) % 9
    a, b = _PHYS[i], _PHYS[j]
    out = _PHYS.replace(a, "P").replace(b, "Q")
    # P and Q take the places of the two sites, so the output axes keep their order
    return np.einsum(f"PQ{a}{b},{_PHYS}->{out}", h4, psi)


def apply_hamiltonian(h, psi):
    d = psi.shape[0]
    h4 = np.asarray(h).reshape(d, d, d, d)
    return sum(apply_bond(h4, psi, i) for i in range(9))


def finite_energy(h, u4, w4, tau):
    psi = finite_state(u4, w4, tau)
    return np.real(np.vdot(psi, apply_hamiltonian(h, psi))) / 9


def finite_environments(h, u4, w4, tau):
    """``2 d<E>/d t^*`` for t = u, w, tau, with ``<E>`` the energy per site."""
    psi = finite_state(u4, w4, tau)
    phi = apply_hamiltonian(h, psi)
    conj = dict(w=w4.conj(), u=u4.conj(), tau=tau.conj())
    slots = [("w", s) for s in _W] + [("u", s) for s in _U] + [("tau", _TAU)]
    envs = {}
    for name in ("u", "w", "tau"):
        total = 0
        for k, (kind, sub) in enumerate(slots):
            if kind != name:
                continue
            rest = [(kk, ss) for kk, (kk_kind, ss) in enumerate(slots) if kk != k]
            subs = ",".join(ss for _, ss in rest) + "," + _PHYS + "->" + sub
            ops = [conj[slots[kk][0]] for kk, _ in rest] + [phi]
            total = total + np.einsum(subs, *ops, optimize=True)
        envs[name] = 2 * total / 9
    return envs


def finite_tangent_overlaps(u4, w4, tau, Xu, Xw):
    """Diagonal (same-copy) norm of the state derivative along ``Xu`` and ``Xw``.

    Returns ``(diag_u, full_w)``: the average over the three copies of
    ``<psi_k|psi_k>`` with copy k of ``u`` replaced by ``Xu``, and the full
    ``<dpsi|dpsi> / 3`` for ``w`` (its cross terms vanish for horizontal Xw).
    """
    def state_with(kind, k, X):
        ops = []
        for j, _ in enumerate(_W):
            ops.append(X if (kind == "w" and j == k) else w4)
        for j, _ in enumerate(_U):
            ops.append(X if (kind == "u" and j == k) else u4)
        ops.append(tau)
        return np.einsum(",".join(_W + _U + (_TAU,)) + "->" + _PHYS, *ops, optimize=True)

    diag_u = np.mean([np.vdot(s, s).real for s in (state_with("u", k, Xu) for k in range(3))])
    dpsi = sum(state_with("w", k, Xw) for k in range(3))
    return diag_u, np.vdot(dpsi, dpsi).real / 3


def coarse_pair_density(tau):
    """Average of the two-site densities of ``tau`` on its three ring bonds (ket first)."""
    r01 = np.einsum("SRz,TUz->SRTU", tau, tau.conj())
    r12 = np.einsum("xSR,xTU->SRTU", tau, tau.conj())
    r20 = np.einsum("RyS,UyT->SRTU", tau, tau.conj())
    rho = (r01 + r12 + r20) / 3
    n = tau.shape[0] ** 2
    return rho.reshape(n, n)


# ---------------------------------------------------------------- uniform MPS

def mps_dense_energy(A3, h):
    """Energy per site of a uniform MPS with any (not necessarily canonical) tensor."""
    d, D, _ = A3.shape
    E = sum(np.kron(A3[s], A3[s].conj()) for s in range(d))  # acts on vec(R), R[ket, bra]
    lam, vr = np.linalg.eig(E)
    i = np.argmax(np.abs(lam))
    lam0 = lam[i]
    lamL, vl = np.linalg.eig(E.T)
    j = np.argmin(np.abs(lamL - lam0))
    r = vr[:, i].reshape(D, D)
    l = vl[:, j].reshape(D, D)  # l[ket, bra] with Tr-pairing sum l * T(R)
    h4 = h.reshape(d, d, d, d)
    num = 0
    for s1 in range(d):
        for s2 in range(d):
            for t1 in range(d):
                for t2 in range(d):
                    if h4[s1, s2, t1, t2] == 0:
                        continue
                    ket = A3[t1] @ A3[t2]
                    bra = A3[s1] @ A3[s2]
                    num += h4[s1, s2, t1, t2] * np.sum(l * (ket @ r @ bra.conj().T))
    norm = np.sum(l * r)
    return float(np.real(num / (norm * lam0**2)))


def mps_transfer_fixed_point(A3):
    d, D, _ = A3.shape
    E = sum(np.kron(A3[s], A3[s].conj()) for s in range(d))
    lam, vr = np.linalg.eig(E)
    r = vr[:, np.argmax(np.abs(lam))].reshape(D, D)
    r = r / np.trace(r)
    return 0.5 * (r + r.conj().T)


def tdvp_direction(A_mat, d, D, h, eps=1e-5):
    """Imaginary-time TDVP velocity of a left-canonical uniform MPS.

    Horizontal tangents ``V_L X`` span the variational manifold modulo gauge;
    the physical Gram matrix is ``Re Tr[B^dagger B' r]`` and the force is a
    central finite difference of :func:`mps_dense_energy`.
    """
    n = d * D
    U, _, _ = np.linalg.svd(A_mat, full_matrices=True)
    VL = U[:, D:]  # orthogonal complement of range(A)
    m = VL.shape[1]
    basis = []
    for i in range(m):
        for j in range(D):
            for phase in (1.0, 1j):
                E = np.zeros((m, D), dtype=complex)
                E[i, j] = phase
                basis.append(VL @ E)
    r = mps_transfer_fixed_point(A_mat.reshape(d, D, D))
    G = np.array([[np.real(np.trace(b.conj().T @ c @ r)) for c in basis] for b in basis])
    F = np.array([
        (mps_dense_energy((A_mat + eps * b).reshape(d, D, D), h)
         - mps_dense_energy((A_mat - eps * b).reshape(d, D, D), h)) / (2 * eps)
        for b in basis
    ])
    coeff = np.linalg.solve(G, F)
    return -sum(c * b for c, b in zip(coeff, basis)).reshape(n, D)

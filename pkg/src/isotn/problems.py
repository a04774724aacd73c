"""Small synthetic problems for exercising the optimizers."""

from __future__ import annotations

import numpy as np

from .linalg import make_rng
from .manifolds import Kind, ProductPoint, ProductTangent, project, random_point
from .optimize import Problem


def brockett_problem(n: int = 20, p: int = 3, seed=0, spread: float = 30.0):
    """Brockett cost ``f(W) = Re Tr[W^dagger H W N]`` on the complex Stiefel manifold.

    ``H`` has eigenvalues evenly spaced over ``[1, spread]`` in a random
    eigenbasis, and ``N = diag(p, ..., 1)``. With distinct eigenvalues
    the minimizer (the lowest eigenvectors of ``H``, ordered, up to phases)
    is nondegenerate modulo the diagonal phase freedom. Returns
    ``(problem, x0, f_min)``.
    """
    rng = make_rng(seed)
    Q = random_point(n, n, Kind.STIEFEL, rng).W
    lam = np.linspace(1.0, spread, n)
    H = (Q * lam) @ Q.conj().T
    H = 0.5 * (H + H.conj().T)
    N = np.diag(np.arange(p, 0, -1, dtype=float))
    f_min = float(np.sum(lam[:p] * np.diag(N)))

    def evaluate(x):
        W = x[0].W
        HW = H @ W
        cost = float(np.real(np.trace(W.conj().T @ HW @ N)))
        return cost, ProductTangent([project(x[0], 2.0 * HW @ N)])

    x0 = ProductPoint([random_point(n, p, Kind.STIEFEL, rng)])
    return Problem(evaluate), x0, f_min


def rayleigh_problem(n: int = 20, p: int = 3, seed=0):
    """Sum of the ``p`` lowest eigenvalues as a Grassmann minimization."""
    rng = make_rng(seed)
    G = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    H = 0.5 * (G + G.conj().T)
    f_min = float(np.sum(np.linalg.eigvalsh(H)[:p]))

    def evaluate(x):
        W = x[0].W
        HW = H @ W
        return float(np.real(np.trace(W.conj().T @ HW))), ProductTangent([project(x[0], 2.0 * HW)])

    x0 = ProductPoint([random_point(n, p, Kind.GRASSMANN, rng)])
    return Problem(evaluate), x0, f_min

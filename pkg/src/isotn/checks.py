"""Quick invariant self-tests run by ``isotn check``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mera as M
from . import mps as P
from .linalg import make_rng
from .manifolds import (
    Kind,
    ProductTangent,
    metric,
    precondition,
    product_metric,
    product_retract,
    project,
    random_point,
    random_tangent,
    retract,
    transport,
)


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)


def _geometry(rng, trials=20):
    worst = dict(idem=0.0, drift=0.0, transport=0.0, precond=0.0)
    for _ in range(trials):
        for kind in Kind:
            n, p = [(6, 2), (8, 3), (12, 4)][rng.integers(3)]
            W = random_point(n, p, kind, rng)
            Dm = rng.standard_normal((n, p)) + 1j * rng.standard_normal((n, p))
            X = project(W, Dm)
            XX = project(W, X.materialize())
            worst["idem"] = max(worst["idem"], (X - XX).norm())
            Y = random_tangent(W, rng)
            for alpha in (0.01, 0.1, 1.0, 10.0):
                W2, _ = retract(W, X, alpha)
                worst["drift"] = max(worst["drift"], W2.drift())
                Yt = transport(Y, W, X, alpha)
                worst["transport"] = max(worst["transport"], abs(metric(Yt, Yt) - metric(Y, Y)))
            G = rng.standard_normal((p, p)) + 1j * rng.standard_normal((p, p))
            rho = G @ G.conj().T + np.eye(p)
            rho /= np.trace(rho).real
            Xt = precondition(X, rho)
            # the rho-weighted metric of the preconditioned tangent reproduces g(X, Y)
            Xm, Ym = Xt.materialize(), Y.materialize()
            phys = np.real(np.trace(Xm.conj().T @ Ym @ rho))
            worst["precond"] = max(worst["precond"], abs(phys - metric(X, Y)))
    return worst


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed)
    out = []
    g = _geometry(rng)
    out += [
        CheckResult("projection idempotence", g["idem"], 1e-12),
        CheckResult("retraction isometry drift", g["drift"], 1e-10),
        CheckResult("transport preserves metric", g["transport"], 1e-10),
        CheckResult("preconditioner defining property", g["precond"], 1e-10),
    ]

    mera = M.random_mera(2, 2, 2, seed=rng)
    layer = mera.transition_layers[0]
    x = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    r = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    adj = abs(M._pair(M.ascend(x, layer), r) - M._pair(x, M.descend(r, layer)))
    out.append(CheckResult("ascend/descend adjoint", adj, 1e-10))

    h = M.ising_hamiltonian()
    ctx = M.MeraContext(h)
    pt = mera.to_point()
    G = ProductTangent([project(v, D) for v, D in zip(pt, ctx.analyse(mera).envs)])
    X = ProductTangent([random_tangent(v, rng) for v in pt])
    eps = 1e-5

    def e_at(a):
        y, _ = product_retract(pt, X, a)
        return M.energy(M.MeraState.from_point(y, 2), h)

    fd = (e_at(eps) - e_at(-eps)) / (2 * eps)
    an = product_metric(G, X)
    out.append(CheckResult("MERA gradient vs finite difference", abs(fd - an) / abs(an), 1e-5))

    mpo = P.tfim_mpo(1.0)
    state = P.random_mps(2, 4, rng)
    Gm = P.mps_gradient(state, mpo)
    Xm = random_tangent(state.A, rng)

    def em(a):
        return P.mps_energy(P.UniformMps(retract(state.A, Xm, a)[0], 2, 4), mpo)

    fd = (em(eps) - em(-eps)) / (2 * eps)
    an = metric(Gm, Xm)
    out.append(CheckResult("MPS gradient vs finite difference", abs(fd - an) / abs(an), 1e-5))
    return out

"""Riemannian gradient descent, nonlinear CG and L-BFGS on product manifolds.

All three share a Hager-Zhang line search along the retraction. Tangent
vectors from previous iterations are carried to the current point with the
vector transport before they are combined with the current gradient.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .manifolds import ProductFlow, ProductPoint, ProductTangent, product_metric

__all__ = [
    "Method",
    "Problem",
    "LineSearchParams",
    "OptimizerOptions",
    "IterateRecord",
    "LineSearchError",
    "NotDescentError",
    "linesearch",
    "cg_beta",
    "lbfgs_direction",
    "minimize",
    "OptimizeResult",
]

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    GD = "gd"
    CG = "cg"
    LBFGS = "lbfgs"


@dataclass
class Problem:
    """A cost on a product manifold.

    ``evaluate(x)`` returns ``(cost, gradient)``; ``preconditioner(x, G)``
    optionally maps a tangent at ``x`` to its preconditioned version.
    """

    evaluate: Callable[[ProductPoint], tuple]
    preconditioner: Optional[Callable[[ProductPoint, ProductTangent], ProductTangent]] = None


@dataclass
class LineSearchParams:
    c1: float = 1e-4
    c2: float = 0.9
    alpha_init: float = 1.0
    max_evals: int = 30
    approx_wolfe_eps: float = 1e-12
    # Hager-Zhang internals
    theta: float = 0.5
    gamma: float = 0.66
    expand: float = 5.0

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")
        if self.alpha_init <= 0:
            raise ValueError("alpha_init must be positive")


@dataclass
class OptimizerOptions:
    method: Method = Method.LBFGS
    grad_tol: float = 1e-8
    max_iters: int = 1000
    lbfgs_memory: int = 8
    cg_restart_period: int = 100
    curvature_eps: float = 1e-12
    verbosity: int = 0
    callback: Optional[Callable] = None

    def __post_init__(self):
        self.method = Method(self.method)
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be at least 1")


@dataclass
class IterateRecord:
    iter: int
    cost: float
    grad_norm: float
    alpha: float
    fevals: int
    wall_seconds: float
    flags: str = ""


class LineSearchError(RuntimeError):
    """No step satisfying the Wolfe conditions within the evaluation budget."""

    def __init__(self, message, best_alpha=0.0, best_point=None):
        super().__init__(message)
        self.best_alpha = best_alpha
        self.best_point = best_point


class NotDescentError(ValueError):
    pass


@dataclass
class _Eval:
    alpha: float
    value: float
    slope: float
    payload: object = None


def linesearch(phi, params: LineSearchParams, phi0=None, alpha=None):
    """Hager-Zhang line search on a scalar function.

    ``phi(alpha)`` returns ``(value, slope)`` or ``(value, slope, payload)``.
    Returns ``(alpha, value, slope, payload, n_evals)`` for a step that
    satisfies the Wolfe conditions, or the approximate Wolfe conditions once
    the decrease is at the level of ``approx_wolfe_eps * |value|``.
    """
    if phi0 is None:
        phi0 = phi(0.0)
    f0, g0 = float(phi0[0]), float(phi0[1])
    if not g0 < 0:
        raise NotDescentError("not a descent direction")
    c1, c2 = params.c1, params.c2
    eps_k = params.approx_wolfe_eps * abs(f0)
    n_evals = 0
    evals: list[_Eval] = []

    def ev(a):
        nonlocal n_evals
        if n_evals >= params.max_evals:
            raise _Budget()
        n_evals += 1
        out = phi(a)
        e = _Eval(a, float(out[0]), float(out[1]), out[2] if len(out) > 2 else None)
        evals.append(e)
        return e

    def accept(e: _Eval):
        if not (math.isfinite(e.value) and math.isfinite(e.slope)):
            return False
        curv = e.slope >= c2 * g0
        if curv and e.value < f0 + c1 * e.alpha * g0:
            return True
        # approximate Wolfe, only in the round-off regime
        return (
            curv
            and e.slope <= (2 * c1 - 1) * g0
            and abs(e.value - f0) <= eps_k
        )

    def bad(e: _Eval):
        return not (math.isfinite(e.value) and math.isfinite(e.slope))

    def update(a: _Eval, b: _Eval, c: _Eval):
        if not (a.alpha < c.alpha < b.alpha):
            return a, b
        if c.slope >= 0 and not bad(c):
            return a, c
        if not bad(c) and c.value <= f0 + eps_k:
            return c, b
        return bisect(a, c)

    def bisect(a: _Eval, b: _Eval):
        while True:
            d = ev((1 - params.theta) * a.alpha + params.theta * b.alpha)
            if accept(d):
                raise _Found(d)
            if not bad(d) and d.slope >= 0:
                return a, d
            if not bad(d) and d.value <= f0 + eps_k:
                a = d
            else:
                b = d

    def secant(a: _Eval, b: _Eval):
        den = b.slope - a.slope
        if den == 0 or not math.isfinite(den):
            return 0.5 * (a.alpha + b.alpha)
        return (a.alpha * b.slope - b.alpha * a.slope) / den

    def eval_inside(a: _Eval, b: _Eval, t):
        if not (a.alpha < t < b.alpha) or not math.isfinite(t):
            t = 0.5 * (a.alpha + b.alpha)
        c = ev(t)
        if accept(c):
            raise _Found(c)
        return c

    def secant2(a: _Eval, b: _Eval):
        c = eval_inside(a, b, secant(a, b))
        A, B = update(a, b, c)
        cbar = None
        if c is B:
            cbar = secant(b, B)
        elif c is A:
            cbar = secant(a, A)
        if cbar is not None and A.alpha < cbar < B.alpha:
            cb = eval_inside(A, B, cbar)
            return update(A, B, cb)
        return A, B

    zero = _Eval(0.0, f0, g0)
    try:
        c = ev(params.alpha_init if alpha is None else alpha)
        if accept(c):
            raise _Found(c)
        # bracketing phase
        a = zero
        while True:
            if bad(c):
                c = ev(0.5 * (a.alpha + c.alpha)) if c.alpha > a.alpha else c
                if accept(c):
                    raise _Found(c)
                continue
            if c.slope >= 0:
                b = c
                break
            if c.value > f0 + eps_k:
                a, b = bisect(a, c)
                break
            a = c
            c = ev(params.expand * c.alpha)
            if accept(c):
                raise _Found(c)
        # interval shrinking
        while True:
            width = b.alpha - a.alpha
            A, B = secant2(a, b)
            if B.alpha - A.alpha > params.gamma * width:
                m = eval_inside(A, B, 0.5 * (A.alpha + B.alpha))
                A, B = update(A, B, m)
            a, b = A, B
            if b.alpha - a.alpha <= 1e-16 * max(b.alpha, 1e-300):
                raise _Budget()
    except _Found as found:
        e = found.e
        return e.alpha, e.value, e.slope, e.payload, n_evals
    except _Budget:
        decreasing = [e for e in evals if not bad(e) and e.value < f0]
        best = min(decreasing, key=lambda e: e.value) if decreasing else None
        raise LineSearchError(
            f"line search failed after {n_evals} evaluations",
            best_alpha=best.alpha if best else 0.0,
            best_point=best,
        ) from None


class _Found(Exception):
    def __init__(self, e):
        self.e = e


class _Budget(Exception):
    pass


def cg_beta(g_new, g_old, d_old, pg_new=None, py=None, eta=0.4, inner=None):
    """Hager-Zhang conjugate gradient coefficient.

    All arguments are tangents at the current point: ``g_old`` and ``d_old``
    already transported. With a preconditioner ``P`` pass ``pg_new = P g_new``
    and ``py = P (g_new - g_old)``; the coefficient then reads

        beta = [<y, P g> - 2 <y, P y> <d, g> / <d, y>] / <d, y>

    which reduces to the plain formula for ``P = 1``. Returns 0 (restart)
    when ``<d, y>`` is not positive.
    """
    inner = inner or product_metric
    y = g_new - g_old
    dy = inner(d_old, y)
    dd = inner(d_old, d_old)
    if dd == 0 or not dy > 1e-300:
        return 0.0
    if pg_new is None:
        pg_new, py = g_new, y
    beta = (inner(y, pg_new) - 2.0 * inner(y, py) * inner(d_old, g_new) / dy) / dy
    lower = eta * inner(d_old, g_old) / dd
    return float(max(beta, lower))


def lbfgs_direction(g, history, precond=None, inner=None):
    """Two-loop recursion; returns the search direction ``-H g``.

    ``history`` is a sequence of ``(s, y, rho)`` tuples, oldest first, with
    ``rho = 1 / <s, y>``. Without a preconditioner the initial inverse
    Hessian is ``<s, y> / <y, y>`` of the newest pair.
    """
    inner = inner or product_metric
    q = g
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * inner(s, q)
        alphas.append(a)
        q = q - y * a
    if precond is not None:
        r = precond(q)
    elif history:
        s, y, rho = history[-1]
        r = q * (1.0 / (rho * inner(y, y)))
    else:
        r = q
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * inner(y, r)
        r = r + s * (a - b)
    return -r


@dataclass
class OptimizeResult:
    x: ProductPoint
    cost: float
    gradient: ProductTangent
    trace: list = field(default_factory=list)
    converged: bool = False
    failed: bool = False
    message: str = ""
    fevals: int = 0

    @property
    def iterations(self):
        return self.trace[-1].iter if self.trace else 0


def default_linesearch(method) -> LineSearchParams:
    method = Method(method)
    if method is Method.CG:
        return LineSearchParams(c1=1e-4, c2=0.1)
    return LineSearchParams(c1=1e-4, c2=0.9)


def minimize(problem: Problem, x0: ProductPoint, options: OptimizerOptions | None = None,
             ls_params: LineSearchParams | None = None) -> OptimizeResult:
    """Minimize ``problem`` from ``x0``.

    The stopping test uses the norm of the unpreconditioned gradient.
    """
    options = options or OptimizerOptions()
    method = options.method
    ls_params = ls_params or default_linesearch(method)
    inner = product_metric
    t0 = time.perf_counter()
    fevals = 0

    def evaluate(x):
        nonlocal fevals
        fevals += 1
        cost, grad = problem.evaluate(x)
        if not math.isfinite(cost):
            raise FloatingPointError(f"cost is not finite: {cost}")
        return cost, grad

    def precond(x, G):
        if problem.preconditioner is None:
            return G
        return problem.preconditioner(x, G)

    x = ProductPoint(x0)
    cost, G = evaluate(x)
    gnorm = G.norm()
    trace = [IterateRecord(0, cost, gnorm, 0.0, fevals, time.perf_counter() - t0)]
    result = OptimizeResult(x, cost, G, trace)
    if options.callback:
        options.callback(trace[-1], x)

    history: deque = deque(maxlen=options.lbfgs_memory)
    d_prev = G_prev = None
    alpha_prev = slope_prev = None
    since_restart = 0

    for it in range(1, options.max_iters + 1):
        if gnorm <= options.grad_tol:
            result.converged = True
            break
        flags = []
        PG = precond(x, G)
        # search direction
        if method is Method.LBFGS:
            d = lbfgs_direction(
                G, list(history),
                precond=(lambda q: precond(x, q)) if problem.preconditioner else None,
                inner=inner,
            )
        elif method is Method.CG and d_prev is not None and since_restart < options.cg_restart_period:
            py = None
            if problem.preconditioner is not None:
                py = PG - precond(x, G_prev)
            beta = cg_beta(G, G_prev, d_prev, pg_new=PG if py is not None else None,
                           py=py, inner=inner)
            d = (-PG).axpy(beta, d_prev)
            if beta == 0.0:
                flags.append("restart")
        else:
            d = -PG
            if method is Method.CG and d_prev is not None:
                flags.append("restart")
        slope = inner(G, d)
        if not slope < 0:
            flags.append("fallback")
            d = -PG
            slope = inner(G, d)
            if not slope < 0:
                flags.append("unpreconditioned")
                d = -G
                slope = -gnorm**2
            history.clear()
            since_restart = 0

        if method is Method.LBFGS or alpha_prev is None:
            a0 = ls_params.alpha_init
        else:
            a0 = alpha_prev * slope_prev / slope
            a0 = min(max(a0, 1e-3 * alpha_prev), 1e3 * alpha_prev)

        def phi(a, _x=x, _d=d):
            flow = ProductFlow(_x, _d, a)
            xa = flow.end
            ca, Ga = evaluate(xa)
            da = flow(_d)
            return ca, inner(Ga, da), (flow, xa, Ga, da)

        try:
            alpha, cost_new, slope_new, payload, _ = linesearch(
                phi, ls_params, phi0=(cost, slope), alpha=a0
            )
        except LineSearchError as err:
            if d_prev is None and not history:
                result.failed = True
                result.message = str(err)
                log.warning("stopping: %s", err)
                break
            # drop memory and retry along the preconditioned gradient next round
            history.clear()
            d_prev = None
            alpha_prev = None
            since_restart = 0
            trace.append(IterateRecord(it, cost, gnorm, 0.0, fevals,
                                       time.perf_counter() - t0, "linesearch-reset"))
            continue
        flow, x_new, G_new, d_new = payload
        # history carried to the new point
        G_old_t = flow(G)
        if method is Method.LBFGS:
            s = d_new * alpha
            y = G_new - G_old_t
            sy = inner(s, y)
            new_hist = [(flow(s_), flow(y_), r_) for s_, y_, r_ in history]
            history.clear()
            history.extend(new_hist)
            if sy > options.curvature_eps * s.norm() * y.norm():
                history.append((s, y, 1.0 / sy))
            else:
                flags.append("skip-pair")
        x, cost, G = x_new, cost_new, G_new
        d_prev, G_prev = d_new, G_old_t
        alpha_prev, slope_prev = alpha, slope
        since_restart = 0 if "restart" in flags or "fallback" in flags else since_restart + 1
        gnorm = G.norm()
        rec = IterateRecord(it, cost, gnorm, alpha, fevals, time.perf_counter() - t0, ",".join(flags))
        trace.append(rec)
        if options.verbosity:
            log.info("iter %d cost %.12g |G| %.3e alpha %.3e fevals %d", it, cost, gnorm, alpha, fevals)
        if options.callback:
            options.callback(rec, x)
    else:
        result.converged = gnorm <= options.grad_tol

    result.x, result.cost, result.gradient = x, cost, G
    result.fevals = fevals
    if gnorm <= options.grad_tol:
        result.converged = True
    return result

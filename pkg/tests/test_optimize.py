import math

import numpy as np
import pytest

from isotn.manifolds import Kind, ProductPoint, ProductTangent, project, random_point
from isotn.optimize import (
    LineSearchError,
    LineSearchParams,
    Method,
    NotDescentError,
    OptimizerOptions,
    Problem,
    cg_beta,
    default_linesearch,
    lbfgs_direction,
    linesearch,
    minimize,
)
from isotn.problems import brockett_problem, rayleigh_problem


def dot(a, b):
    return float(np.real(np.vdot(a, b)))


def wolfe_ok(f0, g0, a, fa, ga, params):
    return fa <= f0 + params.c1 * a * g0 and ga >= params.c2 * g0


@pytest.mark.parametrize("curvature", [0.01, 1.0, 100.0])
@pytest.mark.parametrize("alpha0", [1e-3, 1.0, 50.0])
def test_linesearch_on_quadratics_satisfies_wolfe(curvature, alpha0):
    # phi(a) = 0.5 c a^2 - a, minimizer at 1/c
    params = LineSearchParams(c1=1e-4, c2=0.9)

    def phi(a):
        return 0.5 * curvature * a * a - a, curvature * a - 1.0

    a, fa, ga, _, n = linesearch(phi, params, alpha=alpha0)
    assert wolfe_ok(0.0, -1.0, a, fa, ga, params)
    assert n <= params.max_evals


def test_linesearch_strong_curvature_condition_with_small_c2():
    params = LineSearchParams(c1=1e-4, c2=0.1)

    def phi(a):
        return math.cos(a) - 0.0 * a, -math.sin(a)

    # start just past zero slope descends towards pi
    a, fa, ga, _, _ = linesearch(phi, params, phi0=(math.cos(0.5), -math.sin(0.5)), alpha=None)
    assert wolfe_ok(math.cos(0.5), -math.sin(0.5), a, fa, ga, params)


def test_linesearch_handles_nonfinite_trial_points():
    params = LineSearchParams()

    def phi(a):
        if a > 2.0:
            return math.inf, math.nan
        return (a - 1.0) ** 2, 2 * (a - 1.0)

    a, fa, ga, _, _ = linesearch(phi, params, alpha=10.0)
    assert wolfe_ok(1.0, -2.0, a, fa, ga, params)


def test_linesearch_passes_payload_through():
    def phi(a):
        return (a - 1) ** 2, 2 * (a - 1), {"alpha": a}

    a, _, _, payload, _ = linesearch(phi, LineSearchParams(), alpha=1.0)
    assert payload == {"alpha": a}


def test_linesearch_rejects_ascent_direction():
    with pytest.raises(NotDescentError):
        linesearch(lambda a: (a, 1.0), LineSearchParams())


def test_linesearch_budget_exhaustion():
    # slope never satisfies curvature: phi decreases linearly forever
    with pytest.raises(LineSearchError):
        linesearch(lambda a: (-a, -1.0), LineSearchParams(max_evals=5))


def test_linesearch_params_validation():
    with pytest.raises(ValueError):
        LineSearchParams(c1=0.5, c2=0.4)
    assert default_linesearch("cg").c2 == 0.1 and default_linesearch("lbfgs").c2 == 0.9


def test_cg_beta_hand_computed():
    g_old = np.array([1.0, 0.0])
    d_old = -g_old
    g_new = np.array([0.3, 0.4])
    y = g_new - g_old  # (-0.7, 0.4)
    dy = dot(d_old, y)  # 0.7
    expected = (dot(y, g_new) - 2 * dot(y, y) * dot(d_old, g_new) / dy) / dy
    lower = 0.4 * dot(d_old, g_old) / dot(d_old, d_old)
    assert cg_beta(g_new, g_old, d_old, inner=dot) == pytest.approx(max(expected, lower))


def test_cg_beta_equal_gradients_restart():
    g = np.array([1.0, -2.0])
    assert cg_beta(g, g, -g, inner=dot) == 0.0


def test_cg_beta_orthogonal_gradients_fletcher_reeves_like():
    # with g_new orthogonal to g_old and d_old = -g_old, HZ reduces to ||g_new||^2/||g_old||^2
    # plus a correction that vanishes as ||g_new|| -> 0
    g_old = np.array([1.0, 0.0])
    for eps in (1e-2, 1e-4):
        g_new = np.array([0.0, eps])
        beta = cg_beta(g_new, g_old, -g_old, inner=dot, eta=0.0)
        fr = dot(g_new, g_new) / dot(g_old, g_old)
        assert beta == pytest.approx(fr, rel=1e-6)


def test_cg_beta_zero_direction_is_restart():
    assert cg_beta(np.ones(2), np.zeros(2), np.zeros(2), inner=dot) == 0.0


def test_lbfgs_empty_history_is_steepest_descent():
    g = np.array([1.0, 2.0])
    assert np.allclose(lbfgs_direction(g, [], inner=dot), -g)


def test_lbfgs_single_exact_pair_gives_newton_step_in_2d():
    H = np.array([[3.0, 0.0], [0.0, 3.0]])
    s = np.array([1.0, 0.5])
    y = H @ s
    g = np.array([0.7, -1.1])
    d = lbfgs_direction(g, [(s, y, 1.0 / dot(s, y))], inner=dot)
    assert np.allclose(d, -np.linalg.solve(H, g))


def test_lbfgs_satisfies_secant_equation_for_newest_pair():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    pairs = []
    for s in (np.array([1.0, 0.0]), np.array([0.3, 1.0])):
        y = H @ s
        pairs.append((s, y, 1.0 / dot(s, y)))
    s_new, y_new, _ = pairs[-1]
    assert np.allclose(lbfgs_direction(y_new, pairs, inner=dot), -s_new, atol=1e-12)


def test_lbfgs_newton_step_with_conjugate_pairs():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    s1 = np.array([1.0, 0.0])
    s2 = np.array([-0.25, 1.0])  # H-conjugate to s1
    assert abs(s1 @ H @ s2) < 1e-15
    pairs = [(s, H @ s, 1.0 / dot(s, H @ s)) for s in (s1, s2)]
    g = np.array([0.3, 0.9])
    assert np.allclose(lbfgs_direction(g, pairs, inner=dot), -np.linalg.solve(H, g), atol=1e-12)


def test_lbfgs_uses_preconditioner_as_seed():
    g = np.array([1.0, 1.0])
    d = lbfgs_direction(g, [], precond=lambda q: 0.5 * q, inner=dot)
    assert np.allclose(d, -0.5 * g)


@pytest.mark.parametrize("method", list(Method))
def test_minimize_rayleigh_quotient(method):
    problem, x0, f_min = rayleigh_problem(12, 2, seed=3)
    res = minimize(problem, x0, OptimizerOptions(method, grad_tol=1e-8, max_iters=3000))
    assert res.converged and not res.failed
    assert res.cost == pytest.approx(f_min, abs=1e-10)
    costs = [r.cost for r in res.trace]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(costs, costs[1:]))
    assert res.x[0].drift() < 1e-10


def test_minimize_ordering_on_brockett():
    iters = {}
    for method in Method:
        problem, x0, _ = brockett_problem(seed=1)
        iters[method] = minimize(problem, x0, OptimizerOptions(method, grad_tol=1e-8, max_iters=5000)).iterations
    assert iters[Method.LBFGS] < iters[Method.CG] < iters[Method.GD]


def test_lbfgs_memory_bookkeeping():
    seen = []
    problem, x0, _ = brockett_problem(seed=2)
    minimize(problem, x0, OptimizerOptions(Method.LBFGS, max_iters=30, lbfgs_memory=3,
                                           callback=lambda rec, x: seen.append(rec.iter)))
    assert seen == list(range(31))


def test_preconditioned_gradient_descent_searches_along_preconditioned_gradient():
    base, x0, f_min = rayleigh_problem(10, 2, seed=4)
    directions = []

    def precond(x, G):
        out = G * 0.25
        directions.append((G, out))
        return out

    problem = Problem(base.evaluate, precond)
    res = minimize(problem, x0, OptimizerOptions(Method.GD, grad_tol=1e-8, max_iters=3000))
    assert res.converged and res.cost == pytest.approx(f_min, abs=1e-10)
    assert len(directions) >= res.iterations
    # first step: the line search starts at alpha = 1 along -P G
    first = res.trace[1]
    G0, PG0 = directions[0]
    assert first.cost < res.trace[0].cost and np.isclose(PG0.norm(), 0.25 * G0.norm())


def test_nonfinite_cost_raises():
    W0 = random_point(4, 2, Kind.GRASSMANN, 0)

    def evaluate(x):
        return math.nan, ProductTangent([project(x[0], np.ones((4, 2)))])

    with pytest.raises(FloatingPointError):
        minimize(Problem(evaluate), ProductPoint([W0]), OptimizerOptions(Method.GD))


def test_options_validation():
    with pytest.raises(ValueError):
        OptimizerOptions(Method.GD, grad_tol=0.0)
    with pytest.raises(ValueError):
        OptimizerOptions(Method.LBFGS, lbfgs_memory=0)


def test_cg_periodic_restart_does_not_stick():
    problem, x0, _ = brockett_problem(seed=3)
    res = minimize(problem, x0, OptimizerOptions(Method.CG, max_iters=60, cg_restart_period=5, grad_tol=1e-14))
    restarts = [r.iter for r in res.trace if "restart" in r.flags]
    assert restarts, "periodic restarts should be flagged"
    # after a restart the counter resets, so conjugate steps resume
    assert len(restarts) <= len(res.trace) // 5 + 1

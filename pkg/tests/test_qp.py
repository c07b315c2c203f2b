import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potlearn.games import cournot_form
from potlearn.model import AffineGameForm, AffineMap, QuadraticPotentialProblem, assemble
from potlearn.qp import (
    ActiveSetQP,
    EquilibriumSolution,
    Infeasible,
    best_response_gap,
    extract_active_sets,
    kkt_residuals,
    solve_potential,
)


def scalar_problem(c):
    return QuadraticPotentialProblem(np.eye(1), np.array([c]), np.array([[-1.0]]), np.zeros(1))


def random_qp(rng, n_vars=None, n_rows=None, n_eq=0):
    n_vars = n_vars or int(rng.integers(1, 6))
    n_rows = int(rng.integers(1, 7)) if n_rows is None else n_rows
    M = rng.normal(size=(n_vars, n_vars))
    R = M @ M.T + 0.1 * np.eye(n_vars)
    A = rng.normal(size=(n_rows + n_eq, n_vars))
    x0 = rng.normal(size=n_vars)
    b = A @ x0 + np.concatenate([np.abs(rng.normal(size=n_rows)), np.zeros(n_eq)])
    return QuadraticPotentialProblem(R, rng.normal(size=n_vars) * 3, A, b, np.arange(n_rows, n_rows + n_eq))


def test_interior_optimum():
    sol = solve_potential(scalar_problem(-1.0))
    assert sol.x[0] == pytest.approx(1.0)
    assert sol.lam[0] == pytest.approx(0.0, abs=1e-12)


def test_bound_optimum():
    sol = solve_potential(scalar_problem(1.0))
    assert sol.x[0] == pytest.approx(0.0, abs=1e-12)
    assert sol.lam[0] == pytest.approx(1.0)


def test_cournot_two_agents():
    form = cournot_form(2)
    sol = solve_potential(assemble(form, np.array([1.0, 1.0]), np.zeros(2)))
    np.testing.assert_allclose(sol.x, [1 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(sol.lam, 0, atol=1e-12)


def _sol(problem, x, lam):
    x, lam = np.array(x, dtype=float), np.array(lam, dtype=float)
    return EquilibriumSolution(x=x, lam=lam, residuals=kkt_residuals(problem, x, lam))


def test_active_set_labels():
    prob = scalar_problem(1.0)
    assert [s.tolist() for s in extract_active_sets(prob, _sol(prob, [0.0], [1.0]))] == [[0], [], []]
    prob = scalar_problem(-1.0)
    assert [s.tolist() for s in extract_active_sets(prob, _sol(prob, [1.0], [0.0]))] == [[], [0], []]
    prob = scalar_problem(0.0)
    assert [s.tolist() for s in extract_active_sets(prob, _sol(prob, [0.0], [0.0]))] == [[0], [0], [0]]


def test_equality_rows_always_tight():
    prob = QuadraticPotentialProblem(np.eye(2), np.zeros(2), np.array([[1.0, 1.0], [-1.0, 0.0]]),
                                     np.array([1.0, 0.0]), eq_rows=[0])
    sol = solve_potential(prob)
    np.testing.assert_allclose(sol.x, [0.5, 0.5], atol=1e-12)
    assert 0 in sol.Z and 0 not in sol.Y


def test_infeasible_detected():
    prob = QuadraticPotentialProblem(np.eye(1), np.zeros(1), np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    with pytest.raises(Infeasible):
        solve_potential(prob)


def test_best_response_gaps_cournot():
    form = cournot_form(2)
    theta, mu = np.array([1.0, 1.0]), np.zeros(2)
    np.testing.assert_allclose(best_response_gap(form, theta, mu, np.array([1 / 3, 1 / 3])), 0, atol=1e-12)
    assert np.all(best_response_gap(form, theta, mu, np.zeros(2)) > 0)


def test_single_agent_gap_is_potential_gap():
    form = AffineGameForm(
        n=1, m=2, p=1, R0=AffineMap(np.eye(2)), Ri=AffineMap(np.zeros((1, 2, 2))),
        c0=AffineMap(np.array([-1.0, 2.0])), C=AffineMap(np.zeros((2, 1))),
        A=AffineMap(-np.eye(2)), b=AffineMap(np.zeros(2)),
    )
    prob = assemble(form, np.zeros(1), None)
    x = np.array([3.0, 1.0])
    opt = solve_potential(prob)
    gap = best_response_gap(form, np.zeros(1), None, x)
    assert gap[0] == pytest.approx(prob.potential(x) - opt.value)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_potential_not_beaten_by_feasible_samples(seed):
    rng = np.random.default_rng(seed)
    prob = random_qp(rng)
    sol = solve_potential(prob)
    for _ in range(10):
        y = rng.normal(size=prob.n_vars) * 3
        if np.all(prob.A @ y <= prob.b):
            assert sol.value <= prob.potential(y) + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_kkt_residuals_small(seed):
    rng = np.random.default_rng(seed)
    prob = random_qp(rng, n_eq=int(rng.integers(0, 2)))
    sol = solve_potential(prob)
    assert sol.residuals.max() <= 1e-7 * (1 + np.abs(prob.c).max() + np.abs(prob.b).max())
    Z, Y, _ = sol.Z, sol.Y, sol.W
    assert set(Z.tolist()) | set(Y.tolist()) == set(range(prob.n_rows))


def test_warm_start_gives_same_answer():
    rng = np.random.default_rng(4)
    prob = random_qp(rng, n_vars=4, n_rows=6)
    solver = ActiveSetQP()
    cold = solver.solve(prob)
    warm = solver.solve(prob, x0=cold.x, working_set=cold.working_set)
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-10)
    assert warm.iterations <= cold.iterations


def test_infeasible_start_uses_phase1():
    prob = QuadraticPotentialProblem(np.eye(2), np.zeros(2), np.array([[-1.0, 0.0], [0.0, -1.0]]),
                                     np.array([-1.0, -2.0]))
    sol = ActiveSetQP().solve(prob, x0=np.zeros(2))
    np.testing.assert_allclose(sol.x, [1.0, 2.0], atol=1e-10)

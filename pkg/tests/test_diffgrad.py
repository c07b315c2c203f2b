import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scalar_form
from potlearn.diffgrad import (
    AdjointSystem,
    SingularSystem,
    build_S,
    grad_theta,
    loss,
    loss_and_grad,
    solve_given_Z,
)
from potlearn.games import cournot_form
from potlearn.model import Datapoint, QuadraticPotentialProblem, assemble
from potlearn.qp import solve_potential
from potlearn.verify import finite_diff_grad


def scalar_problem(R=2.0, c=-1.0, a=-1.0, b=0.0):
    return QuadraticPotentialProblem(np.array([[R]]), np.array([c]), np.array([[a]]), np.array([b]))


def test_inactive_block_is_unconstrained_foc():
    system = build_S(scalar_problem(), Z=[], Y=[0])
    np.testing.assert_array_equal(system.S, [[2, -1], [0, 1]])
    x, lam = solve_given_Z(system)
    assert x[0] == pytest.approx(0.5)
    assert lam[0] == 0


def test_active_block_pins_constraint():
    system = build_S(scalar_problem(c=1.0, b=0.0), Z=[0], Y=[])
    np.testing.assert_array_equal(system.S[1], [1, 0])
    x, lam = solve_given_Z(system)
    assert x[0] == pytest.approx(0.0, abs=1e-15)
    # stationarity 2*0 + 1 - lam = 0
    assert lam[0] == pytest.approx(1.0)


def test_identity_system():
    S = np.eye(3)
    sys_ = AdjointSystem(S=S, rhs=np.array([1.0, 0, 0]), Z=np.zeros(0, int), Y=np.zeros(0, int), n_vars=1)
    x, lam = solve_given_Z(sys_)
    np.testing.assert_array_equal(np.concatenate([x, lam]), [1, 0, 0])


def test_cournot_interior_matches_solver():
    prob = assemble(cournot_form(2), np.array([1.0, 1.0]), np.zeros(2))
    x, _ = solve_given_Z(build_S(prob, Z=[]))
    np.testing.assert_allclose(x, solve_potential(prob).x, atol=1e-10)
    np.testing.assert_allclose(x, [1 / 3, 1 / 3], atol=1e-12)


def test_partition_must_cover():
    with pytest.raises(ValueError):
        build_S(scalar_problem(), Z=[0], Y=[0])


def test_singular_system_detected():
    prob = QuadraticPotentialProblem(np.eye(1), np.zeros(1), np.array([[1.0], [1.0]]), np.zeros(2))
    with pytest.raises(SingularSystem):
        solve_given_Z(build_S(prob, Z=[0, 1]))


def test_loss_examples():
    form = cournot_form(2)
    theta = np.array([1.0, 1.0])
    prob = assemble(form, theta, np.zeros(2))
    x = solve_potential(prob).x
    assert loss(form, theta, [[]], [Datapoint(x=x, mu=np.zeros(2))]) == pytest.approx(0, abs=1e-20)
    far = Datapoint(x=x + np.array([1.0, 0.0]), mu=np.zeros(2))
    assert loss(form, theta, [[]], [far]) == pytest.approx(1.0)
    farther = Datapoint(x=x + np.array([1.0, np.sqrt(2.0)]), mu=np.zeros(2))
    assert loss(form, theta, [[], []], [far, farther]) == pytest.approx(2.0)
    assert loss(form, theta, [[], []], [farther, far]) == loss(form, theta, [[], []], [far, farther])


def test_scalar_gradient_closed_form():
    form = scalar_form()
    dp = Datapoint(x=np.array([2.0]), mu=None)
    assert grad_theta(form, np.array([0.0]), [], dp)[0] == pytest.approx(-4.0)
    assert finite_diff_grad(form, np.array([0.0]), dp)[0] == pytest.approx(-4.0, rel=1e-8)


def test_pinned_constraint_has_zero_gradient():
    form = scalar_form(with_bound=True)
    dp = Datapoint(x=np.array([2.0]), mu=None)
    # theta = -1: optimum x = 0 on the bound with positive dual
    assert grad_theta(form, np.array([-1.0]), [0], dp)[0] == 0.0
    assert finite_diff_grad(form, np.array([-1.0]), dp)[0] == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_cournot_two_agents_matches_differences(seed):
    rng = np.random.default_rng(seed)
    form = cournot_form(2)
    theta = np.array([abs(rng.normal()) + 0.5, abs(rng.normal()) + 0.2])
    dp = Datapoint(x=np.abs(rng.normal(size=2)), mu=np.abs(rng.normal(size=2)) * 0.3)
    sol = solve_potential(assemble(form, theta, dp.mu))
    fd = finite_diff_grad(form, theta, dp)
    ok = np.isfinite(fd)
    g = grad_theta(form, theta, sol.Z, dp)
    np.testing.assert_allclose(g[ok], fd[ok], rtol=1e-5, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_directional_derivative(seed):
    rng = np.random.default_rng(seed)
    form = cournot_form(4)
    theta = np.array([2.0, 0.5]) + 0.1 * rng.normal(size=2)
    dp = Datapoint(x=np.abs(rng.normal(size=4)), mu=np.abs(rng.normal(size=4)))
    Z = solve_potential(assemble(form, theta, dp.mu)).Z
    v = rng.normal(size=2)
    h = 1e-5
    lp = np.sum((solve_potential(assemble(form, theta + h * v, dp.mu)).x - dp.x) ** 2)
    lm = np.sum((solve_potential(assemble(form, theta - h * v, dp.mu)).x - dp.x) ** 2)
    zp = solve_potential(assemble(form, theta + h * v, dp.mu)).Z
    zm = solve_potential(assemble(form, theta - h * v, dp.mu)).Z
    if not (np.array_equal(zp, Z) and np.array_equal(zm, Z)):
        return
    fd = (lp - lm) / (2 * h)
    g = grad_theta(form, theta, Z, dp)
    assert v @ g == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_fixed_set_reproduces_equilibrium(congestion_data):
    _, form, ds = congestion_data
    theta = ds.meta["theta_true"]
    for dp in ds.points[:10]:
        sol = solve_potential(assemble(form, np.array(theta), dp.mu))
        _, _, x = loss_and_grad(form, np.array(theta), sol.Z, dp, lam_hint=sol.lam)
        np.testing.assert_allclose(x, sol.x, atol=1e-8)

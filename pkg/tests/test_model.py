import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potlearn.games import cournot_form
from potlearn.model import (
    AffineGameForm,
    AffineMap,
    Box,
    DimensionError,
    assemble,
    check_assumptions,
    independent_rows,
    partials,
    project_theta,
)

floats = st.floats(-5, 5, allow_nan=False)


def simple_form(R0, Ri, A=None, b=None, box=None, C=None):
    N = R0.shape[0]
    p = Ri.shape[0]
    A = np.zeros((0, N)) if A is None else A
    b = np.zeros(A.shape[0]) if b is None else b
    return AffineGameForm(
        n=N, m=1, p=p, R0=AffineMap(R0), Ri=AffineMap(Ri), c0=AffineMap(np.zeros(N)),
        C=AffineMap(np.zeros((N, p)) if C is None else C), A=AffineMap(A), b=AffineMap(b), box=box,
    )


def test_cournot_assemble_two_agents():
    form = cournot_form(2)
    prob = assemble(form, np.array([1.0, 1.0]), np.zeros(2))
    np.testing.assert_allclose(prob.R, [[2, 1], [1, 2]])
    np.testing.assert_allclose(prob.c, [-1, -1])
    np.testing.assert_allclose(prob.gradient(np.array([1 / 3, 1 / 3])), 0, atol=1e-15)


def test_zero_theta_leaves_base():
    R0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    form = simple_form(R0, np.stack([np.eye(2)]))
    prob = assemble(form, np.zeros(1), None)
    np.testing.assert_array_equal(prob.R, R0)
    np.testing.assert_array_equal(prob.c, 0)


def test_scalar_scaling():
    R0 = np.diag([1.0, 3.0])
    form = simple_form(R0, np.stack([np.eye(2)]))
    np.testing.assert_allclose(assemble(form, np.array([2.0]), None).R, R0 + 2 * np.eye(2))


def test_cournot_partials():
    form = cournot_form(3)
    dR, dc = partials(form, 0, np.zeros(3))
    np.testing.assert_array_equal(dR, 0)
    np.testing.assert_array_equal(dc, -1)
    dR, dc = partials(form, 1, np.zeros(3))
    np.testing.assert_array_equal(dR, np.eye(3) + np.ones((3, 3)))
    np.testing.assert_array_equal(dc, 0)


def test_identity_column_partial():
    form = simple_form(np.eye(2), np.zeros((1, 2, 2)), C=np.array([[1.0], [0.0]]))
    dR, dc = partials(form, 0, None)
    np.testing.assert_array_equal(dR, 0)
    np.testing.assert_array_equal(dc, [1, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(floats, min_size=2, max_size=2), st.lists(floats, min_size=2, max_size=2),
       st.floats(0, 1), st.lists(floats, min_size=3, max_size=3))
def test_assemble_is_affine(t1, t2, alpha, mu):
    form = cournot_form(3)
    t1, t2, mu = np.array(t1), np.array(t2), np.array(mu)
    mid = assemble(form, alpha * t1 + (1 - alpha) * t2, mu)
    p1, p2 = assemble(form, t1, mu), assemble(form, t2, mu)
    np.testing.assert_allclose(mid.R, alpha * p1.R + (1 - alpha) * p2.R, atol=1e-12)
    np.testing.assert_allclose(mid.c, alpha * p1.c + (1 - alpha) * p2.c, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(floats, min_size=2, max_size=2), st.lists(floats, min_size=3, max_size=3))
def test_partials_match_differences(theta, mu):
    form = cournot_form(3)
    theta, mu = np.array(theta), np.array(mu)
    h = 0.5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        up, down = assemble(form, theta + e, mu), assemble(form, theta - e, mu)
        dR, dc = partials(form, j, mu)
        np.testing.assert_allclose((up.R - down.R) / (2 * h), dR, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose((up.c - down.c) / (2 * h), dc, rtol=1e-10, atol=1e-10)


def test_psd_parts_pass():
    report = check_assumptions(simple_form(np.eye(3), np.ones((1, 3, 3))), [None])
    assert report.passed, str(report)


def test_zero_base_fails():
    report = check_assumptions(simple_form(np.zeros((2, 2)), np.stack([np.eye(2)])), [None])
    assert not report.passed
    assert not report.convex
    assert any("R0 not positive definite" in m for m in report.messages)


def test_box_lower_bound_restores_definiteness():
    form = simple_form(np.zeros((2, 2)), np.stack([np.eye(2)]), box=Box(np.array([1e-3]), np.array([np.inf])))
    assert check_assumptions(form, [None]).convex


def test_duplicated_row_fails_licq():
    A = np.array([[-1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]])
    report = check_assumptions(simple_form(np.eye(2), np.zeros((1, 2, 2)), A=A), [None])
    assert not report.licq
    assert any("rows 0 and 2" in m for m in report.messages)


def test_project_clamps():
    box = Box(np.array([0.0, 0.0]), np.array([np.inf, 1.0]))
    np.testing.assert_array_equal(project_theta(np.array([-1.0, 5.0]), box), [0, 1])
    np.testing.assert_array_equal(project_theta(np.array([0.5, 0.5]), box), [0.5, 0.5])
    np.testing.assert_array_equal(project_theta(np.array([-7.0, 9.0]), Box.unbounded(2)), [-7, 9])
    np.testing.assert_array_equal(project_theta(np.array([-7.0, 9.0]), None), [-7, 9])


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_projection_idempotent(theta):
    box = Box(np.array([-1.0, 0.0, 2.0]), np.array([1.0, np.inf, 3.0]))
    once = project_theta(np.array(theta), box)
    np.testing.assert_array_equal(project_theta(once, box), once)
    assert box.contains(once)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        simple_form(np.eye(2), np.zeros((1, 3, 3)))
    form = cournot_form(2)
    with pytest.raises(DimensionError):
        assemble(form, np.ones(3), np.zeros(2))
    with pytest.raises(DimensionError):
        assemble(form, np.ones(2), np.zeros(5))


def test_affine_map_context():
    mp = AffineMap(np.zeros(2), coef=np.array([[1.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_array_equal(mp(np.array([3.0, 4.0])), [3, 8])
    assert mp.n_context == 2


def test_independent_rows_greedy():
    rows = np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0]])
    assert independent_rows(rows) == [0, 2]

"""Independent oracles: finite differences, active-set enumeration, grid search.

Nothing here touches the implicit-gradient code. The only solver shared with
the learner is the potential minimizer in :mod:`potlearn.qp`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from potlearn.games import Dataset
from potlearn.model import AffineGameForm, Array, Datapoint, QuadraticPotentialProblem, assemble, project_theta
from potlearn.qp import ActiveSetQP, EquilibriumSolution, extract_active_sets, kkt_residuals, solve_potential

MAX_ENUM_ROWS = 12
DENSE_GRID_MAX_P = 3


def _equilibrium_loss(form, theta, dp: Datapoint):
    sol = solve_potential(assemble(form, theta, dp.mu))
    return float(np.sum((sol.x - dp.x) ** 2)), sol


def finite_diff_grad(form: AffineGameForm, theta: Array, datapoint: Datapoint, h: float = 1e-5) -> Array:
    """Central differences of ``|x*(theta) - xbar|^2`` with full equilibrium solves.

    A component whose tight set changes on ``[theta - h e_j, theta + h e_j]``
    sits on a kink of the loss; it is returned as NaN instead of a
    meaningless slope.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float)
    _, base = _equilibrium_loss(form, theta, datapoint)
    base_Z = set(base.Z.tolist())
    grad = np.full(theta.size, np.nan)
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = h
        lp, sp = _equilibrium_loss(form, theta + e, datapoint)
        lm, sm = _equilibrium_loss(form, theta - e, datapoint)
        if set(sp.Z.tolist()) != base_Z or set(sm.Z.tolist()) != base_Z:
            continue
        grad[j] = (lp - lm) / (2 * h)
    return grad


def enumerate_active_sets_qp(problem: QuadraticPotentialProblem, tol: float = 1e-9) -> EquilibriumSolution:
    """Global minimizer by trying every subset of inequality rows as the tight set.

    Each subset gives an equality-constrained system; candidates that are
    primal and dual feasible are kept and the lowest potential wins.
    Exponential in the number of inequality rows, so capped at 12.
    """
    ineq = problem.ineq_rows
    if ineq.size > MAX_ENUM_ROWS:
        raise ValueError(f"enumeration is limited to {MAX_ENUM_ROWS} inequality rows, got {ineq.size}")
    N = problem.n_vars
    eq = problem.eq_mask
    bscale = 1.0 + np.abs(problem.b).max(initial=0.0)
    best = None
    for size in range(ineq.size + 1):
        for subset in itertools.combinations(ineq.tolist(), size):
            rows = np.concatenate([problem.eq_rows, np.array(subset, dtype=int)]).astype(int)
            AW = problem.A[rows]
            K = np.zeros((N + rows.size, N + rows.size))
            K[:N, :N] = problem.R
            K[:N, N:] = AW.T
            K[N:, :N] = AW
            rhs = np.concatenate([-problem.c, problem.b[rows]])
            try:
                z = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(z)) or np.abs(K @ z - rhs).max() > 1e-8 * (1 + np.abs(rhs).max()):
                continue
            x = z[:N]
            lam = np.zeros(problem.n_rows)
            lam[rows] = z[N:]
            slack = problem.b - problem.A @ x
            if np.any(slack[~eq] < -tol * bscale) or np.any(lam[~eq] < -tol):
                continue
            value = problem.potential(x)
            if best is None or value < best[0] - 1e-14:
                best = (value, x, lam, size)
    if best is None:
        raise ValueError("no KKT point found; the problem is infeasible or not convex")
    value, x, lam, _ = best
    lam = lam.copy()
    lam[~eq] = np.maximum(lam[~eq], 0.0)
    sol = EquilibriumSolution(x=x, lam=lam, residuals=kkt_residuals(problem, x, lam), value=value)
    sol.Z, sol.Y, sol.W = extract_active_sets(problem, sol)
    return sol


@dataclass
class GridResult:
    theta_best: Array
    loss_best: float
    n_evaluated: int


def _grid_points(grid_spec, p: int, rng: np.random.Generator | None):
    if isinstance(grid_spec, dict):
        lower = np.asarray(grid_spec["lower"], dtype=float)
        upper = np.asarray(grid_spec["upper"], dtype=float)
        if p <= DENSE_GRID_MAX_P and "budget" not in grid_spec:
            axes = [np.linspace(lo, hi, int(grid_spec.get("num", 41))) for lo, hi in zip(lower, upper)]
            return _snake(axes)
        rng = rng or np.random.default_rng(0)
        return list(rng.uniform(lower, upper, size=(int(grid_spec["budget"]), p)))
    axes = [np.asarray(a, dtype=float) for a in grid_spec]
    if len(axes) != p:
        raise ValueError(f"grid needs one axis per parameter ({p}), got {len(axes)}")
    return _snake(axes)


def _snake(axes):
    # boustrophedon order keeps consecutive points close, which helps warm starts
    if len(axes) == 1:
        return [np.array([v]) for v in axes[0]]
    pts = []
    for i, v in enumerate(axes[0]):
        inner = _snake(axes[1:])
        if i % 2:
            inner = inner[::-1]
        pts.extend(np.concatenate([[v], q]) for q in inner)
    return pts


def grid_search_theta(
    form: AffineGameForm,
    dataset: Dataset | Sequence[Datapoint],
    grid_spec,
    rng: np.random.Generator | None = None,
) -> tuple[Array, float]:
    """Best full-equilibrium training loss over a parameter grid.

    ``grid_spec`` is either a sequence of per-parameter axes (cartesian
    product) or a dict ``{"lower", "upper", "num"}`` for a dense grid. With a
    ``"budget"`` key, or for more than three parameters, the dict instead
    requests that many uniform random points. Points are projected onto the
    parameter box. Ties keep the first point in grid order.
    """
    points = dataset.train if isinstance(dataset, Dataset) else list(dataset)
    if not points:
        raise ValueError("no datapoints to evaluate")
    res = grid_search(form, points, grid_spec, rng)
    return res.theta_best, res.loss_best


def grid_search(form, points, grid_spec, rng=None) -> GridResult:
    solver = ActiveSetQP()
    warm: dict[int, tuple] = {}
    best_theta, best_loss = None, np.inf
    thetas = _grid_points(grid_spec, form.p, rng)
    for theta in thetas:
        theta = project_theta(theta, form.box)
        total = 0.0
        for k, dp in enumerate(points):
            problem = assemble(form, theta, dp.mu)
            prev = warm.get(k)
            sol = solver.solve(problem) if prev is None else solver.solve(problem, x0=prev[0], working_set=prev[1])
            warm[k] = (sol.x, sol.working_set)
            total += float(np.sum((sol.x - dp.x) ** 2))
        value = total / len(points)
        if value < best_loss:
            best_theta, best_loss = theta.copy(), value
    return GridResult(theta_best=best_theta, loss_best=float(best_loss), n_evaluated=len(thetas))


def write_report(path: str | Path, report: dict) -> None:
    """Write an oracle report as indented JSON."""
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")

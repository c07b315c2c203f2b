"""Equilibria for a fixed active set, and their derivative in theta.

For a partition of the inequality rows into a tight set ``Z`` and a zero-dual
set ``Y`` the equilibrium solves the square linear system::

    [  R     A'  ] [x  ]   [ -c   ]
    [ -A_Z   0   ] [lam] = [ -b_Z ]
    [  0     I_Y ]         [  0   ]

Equality rows always belong to the Z block. The loss gradient is obtained
with one adjoint solve against this matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lapack, lu_factor, lu_solve

from potlearn.model import (
    AffineGameForm,
    Array,
    Datapoint,
    QuadraticPotentialProblem,
    assemble,
    independent_rows,
    partials,
)

RCOND_MIN = 1e-12


class SingularSystem(np.linalg.LinAlgError):
    """The active-set system is (numerically) singular."""

    def __init__(self, msg: str, datapoint: int | None = None):
        self.datapoint = datapoint
        super().__init__(msg if datapoint is None else f"datapoint {datapoint}: {msg}")


@dataclass
class AdjointSystem:
    S: Array
    rhs: Array
    Z: np.ndarray
    Y: np.ndarray
    n_vars: int

    def __post_init__(self):
        self._lu = None

    def factor(self):
        """LU factors of ``S``; raises SingularSystem when badly conditioned."""
        if self._lu is None:
            with warnings.catch_warnings():
                # singularity is judged by the condition estimate below
                warnings.simplefilter("ignore", LinAlgWarning)
                lu, piv = lu_factor(self.S, check_finite=False)
            anorm = np.abs(self.S).sum(axis=0).max()
            rcond, info = lapack.dgecon(lu, anorm, norm="1")
            if info != 0 or not np.isfinite(rcond) or rcond < RCOND_MIN:
                raise SingularSystem(f"active-set system singular (rcond={rcond:.2e})")
            self._lu = (lu, piv)
        return self._lu

    def solve(self, rhs: Array, trans: int = 0) -> Array:
        lu = self.factor()
        sol = lu_solve(lu, rhs, trans=trans, check_finite=False)
        M = self.S.T if trans else self.S
        # one step of iterative refinement
        return sol + lu_solve(lu, rhs - M @ sol, trans=trans, check_finite=False)


def complement_rows(problem: QuadraticPotentialProblem, Z) -> np.ndarray:
    z = np.zeros(problem.n_rows, dtype=bool)
    z[np.asarray(Z, dtype=int)] = True
    return np.flatnonzero(~z & ~problem.eq_mask)


def build_S(problem: QuadraticPotentialProblem, Z, Y=None) -> AdjointSystem:
    """Assemble the active-set system; ``Y`` defaults to the inequality rows outside ``Z``."""
    eq = problem.eq_mask
    Z = np.union1d(np.asarray(Z, dtype=int), problem.eq_rows).astype(int)
    Y = complement_rows(problem, Z) if Y is None else np.unique(np.asarray(Y, dtype=int))
    if np.any(eq[Y]):
        raise ValueError(f"equality rows {Y[eq[Y]].tolist()} cannot be in Y")
    overlap = np.intersect1d(Z, Y)
    if overlap.size:
        raise ValueError(f"rows {overlap.tolist()} are in both Z and Y")
    covered = np.zeros(problem.n_rows, dtype=bool)
    covered[Z] = True
    covered[Y] = True
    if not covered.all():
        raise ValueError(f"rows {np.flatnonzero(~covered).tolist()} are in neither Z nor Y")

    N, L = problem.n_vars, problem.n_rows
    S = np.zeros((N + L, N + L))
    S[:N, :N] = problem.R
    S[:N, N:] = problem.A.T
    nz = Z.size
    S[N:N + nz, :N] = -problem.A[Z]
    S[N + nz + np.arange(Y.size), N + Y] = 1.0
    rhs = np.concatenate([-problem.c, -problem.b[Z], np.zeros(Y.size)])
    return AdjointSystem(S=S, rhs=rhs, Z=Z, Y=Y, n_vars=N)


def solve_given_Z(system: AdjointSystem) -> tuple[Array, Array]:
    """Equilibrium ``(x, lam)`` that is tight on Z and has zero duals on Y."""
    z = system.solve(system.rhs)
    N = system.n_vars
    return z[:N], z[N:]


def reduce_dependent_rows(problem: QuadraticPotentialProblem, Z, lam: Array | None = None):
    """Move linearly dependent Z rows to Y.

    Equality rows are kept first, then inequality rows by decreasing dual.
    Every dropped row is a combination of kept ones, and ``b`` does not depend
    on theta, so the tight rows still pin the same ``x`` near the current
    parameters while the system becomes nonsingular. Returns ``(Z, Y, dropped)``.
    """
    eq = problem.eq_mask
    Z = np.asarray(Z, dtype=int)
    eq_part = [int(r) for r in problem.eq_rows]
    ineq_part = [int(r) for r in Z if not eq[r]]
    if lam is not None:
        ineq_part.sort(key=lambda r: (-lam[r], r))
    order = eq_part + ineq_part
    keep = [order[i] for i in independent_rows(problem.A[order], tol=1e-9)] if order else []
    dropped = sorted(set(order) - set(keep))
    Zr = np.array(sorted(r for r in keep), dtype=int)
    Yr = complement_rows(problem, Zr)
    return Zr, Yr, dropped


def implied_rows(problem: QuadraticPotentialProblem, Z, W) -> np.ndarray:
    """Rows of ``W`` lying in the span of the other tight rows.

    Such a row stays tight whenever the rest of Z is, so it cannot change the
    fixed-active-set equilibrium whichever side of the partition it lands on.
    """
    W = np.asarray(W, dtype=int)
    if W.size == 0:
        return W
    base = [int(r) for r in np.union1d(Z, problem.eq_rows) if r not in set(W.tolist())]
    order = base + [int(r) for r in W]
    keep = set(order[i] for i in independent_rows(problem.A[order], tol=1e-9))
    return np.array([r for r in W if r not in keep], dtype=int)


def _build_reduced(problem, Z, lam=None):
    Zr, Yr, dropped = reduce_dependent_rows(problem, Z, lam)
    eq_dropped = [r for r in dropped if problem.eq_mask[r]]
    if eq_dropped:
        # redundant equalities: their duals are fixed to zero like Y rows
        S = build_S(_with_rows_as_ineq(problem, eq_dropped), Zr, np.union1d(Yr, eq_dropped))
        return S
    return build_S(problem, Zr, Yr)


def _with_rows_as_ineq(problem, rows):
    keep_eq = np.setdiff1d(problem.eq_rows, rows)
    return QuadraticPotentialProblem(problem.R, problem.c, problem.A, problem.b, keep_eq,
                                     problem.n, problem.m, problem.row_agent)


def loss_and_grad(
    form: AffineGameForm,
    theta: Array,
    Z,
    datapoint: Datapoint,
    lam_hint: Array | None = None,
    reduce: bool = True,
) -> tuple[float, Array, Array]:
    """Squared distance ``|x_Z(theta) - xbar|^2``, its theta-gradient, and ``x_Z``.

    Adjoint method: with ``S (x, lam) = rhs``, solve ``S' w = (2 (x - xbar), 0)``;
    then ``d loss / d theta_j = -w_x' (R_j x + C_j)`` because only the R block
    of S and the ``-c`` block of the right-hand side depend on theta.
    """
    problem = assemble(form, theta, datapoint.mu)
    system = _build_reduced(problem, Z, lam_hint) if reduce else build_S(problem, Z)
    x, lam = solve_given_Z(system)
    resid = x - datapoint.x
    g = np.zeros(system.S.shape[0])
    g[: x.size] = 2.0 * resid
    w = system.solve(g, trans=1)
    wx = w[: x.size]
    grad = np.empty(form.p)
    for j in range(form.p):
        dR, dc = partials(form, j, datapoint.mu)
        grad[j] = -wx @ (dR @ x + dc)
    return float(resid @ resid), grad, x


def grad_theta(form: AffineGameForm, theta: Array, Z, datapoint: Datapoint, lam_hint: Array | None = None) -> Array:
    """Exact gradient of ``|x_Z(theta) - xbar|^2`` for the active set ``Z``."""
    return loss_and_grad(form, theta, Z, datapoint, lam_hint)[1]


def loss(form: AffineGameForm, theta: Array, Z_choices: Sequence, batch: Sequence[Datapoint]) -> float:
    """Mean squared distance between fixed-active-set equilibria and observations."""
    if len(Z_choices) != len(batch):
        raise ValueError("one active set per datapoint is required")
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    for k, (Z, dp) in enumerate(zip(Z_choices, batch)):
        problem = assemble(form, theta, dp.mu)
        try:
            x, _ = solve_given_Z(_build_reduced(problem, Z))
        except SingularSystem as exc:
            raise SingularSystem(str(exc), datapoint=k) from exc
        total += float(np.sum((x - dp.x) ** 2))
    return total / len(batch)

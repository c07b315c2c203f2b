"""Primal active-set solver for the convex potential problem.

The solver returns exact duals and a crisp working set, which is what the
active-set extraction and the implicit gradient downstream rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from potlearn.model import (
    AffineGameForm,
    Array,
    QuadraticPotentialProblem,
    assemble,
    independent_rows,
)

DEFAULT_KKT_TOL = 1e-8
DEFAULT_ACT_TOL = 1e-7


class Infeasible(RuntimeError):
    """No point satisfies the constraints."""


class IllConditioned(RuntimeError):
    """The active-set iteration stalled with a residual above tolerance."""


@dataclass
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass
class EquilibriumSolution:
    x: Array
    lam: Array
    residuals: KKTResiduals
    Z: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    Y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    W: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    working_set: tuple[int, ...] = ()
    iterations: int = 0
    value: float = np.nan


def kkt_residuals(problem: QuadraticPotentialProblem, x: Array, lam: Array) -> KKTResiduals:
    """Infinity-norm KKT residuals of ``(x, lam)``; duals on eq rows are free."""
    eq = problem.eq_mask
    slack = problem.b - problem.A @ x
    stat = problem.R @ x + problem.c + problem.A.T @ lam
    primal = 0.0
    if np.any(~eq):
        primal = max(primal, float(np.max(-slack[~eq], initial=0.0)))
    if np.any(eq):
        primal = max(primal, float(np.max(np.abs(slack[eq]))))
    dual = max(0.0, float(np.max(-lam[~eq], initial=0.0)))
    comp = float(abs(lam[~eq] @ slack[~eq])) if np.any(~eq) else 0.0
    return KKTResiduals(
        stationarity=float(np.max(np.abs(stat), initial=0.0)),
        primal=primal,
        dual=dual,
        complementarity=comp,
    )


def residuals_ok(problem: QuadraticPotentialProblem, sol: EquilibriumSolution, tol: float) -> bool:
    """KKT invariants at tolerance ``tol``, stationarity scaled by the data magnitude."""
    res = sol.residuals
    scale = 1.0 + max(
        float(np.abs(problem.c).max(initial=0.0)),
        float(np.abs(problem.R).max(initial=0.0)) * float(np.abs(sol.x).max(initial=0.0)),
    )
    bscale = 1.0 + float(np.abs(problem.b).max(initial=0.0))
    return (
        res.stationarity <= tol * scale
        and res.primal <= tol * bscale
        and res.dual <= tol
        and res.complementarity <= tol * bscale * (1.0 + float(np.abs(sol.lam).max(initial=0.0)))
    )


class ActiveSetQP:
    """Primal active-set method for ``min 0.5 x'Rx + c'x  s.t.  Ax <= b``.

    Each iteration solves the equality-constrained subproblem on the current
    working set, takes the longest feasible step along it (ratio test, ties
    broken by smallest row index) and, at a subproblem minimizer, releases the
    inequality with the most negative multiplier. A warm start ``(x0,
    working_set)`` from a previous solve of the same feasible set usually
    converges in one or two iterations.

    Instances keep per-solve scratch state; use one per thread.
    """

    def __init__(self, kkt_tol: float = DEFAULT_KKT_TOL, act_tol: float = DEFAULT_ACT_TOL, max_iter: int | None = None):
        self.kkt_tol = kkt_tol
        self.act_tol = act_tol
        self.max_iter = max_iter
        self.last_phase1 = False

    def solve(
        self,
        problem: QuadraticPotentialProblem,
        x0: Array | None = None,
        working_set=None,
    ) -> EquilibriumSolution:
        R, c, A, b = problem.R, problem.c, problem.A, problem.b
        N, L = problem.n_vars, problem.n_rows
        eq = problem.eq_mask
        feas_tol = 1e-9 * (1.0 + np.abs(b))

        x = self._starting_point(problem, x0, working_set, feas_tol)
        slack = b - A @ x

        # eq rows first, then the warm-start guess, then any other tight row
        candidates = list(problem.eq_rows)
        tight = np.abs(slack) <= 1e-9 * (1.0 + np.abs(b))
        if working_set is not None:
            candidates += [r for r in working_set if not eq[r] and tight[r]]
        else:
            candidates += [r for r in np.flatnonzero(tight) if not eq[r]]
        seen = set()
        candidates = [r for r in candidates if not (r in seen or seen.add(r))]
        keep = independent_rows(A[candidates]) if candidates else []
        W = [candidates[i] for i in keep]
        W = _truncate_to_rank(W, eq, N)

        max_iter = self.max_iter or 50 * (N + L) + 100
        step_tol = 1e-12
        for it in range(1, max_iter + 1):
            p, lam_w = _eqp_step(R, A, W, R @ x + c, b[W] - A[W] @ x if W else np.zeros(0))
            if np.max(np.abs(p), initial=0.0) <= step_tol * (1.0 + np.max(np.abs(x), initial=0.0)):
                x = x + p
                ineq_pos = [k for k, r in enumerate(W) if not eq[r]]
                if not ineq_pos:
                    break
                lam_ineq = lam_w[ineq_pos]
                lmin = lam_ineq.min()
                if lmin >= -self.kkt_tol:
                    break
                # most negative multiplier leaves; ties to the smallest row index
                cand = [W[ineq_pos[k]] for k in np.flatnonzero(lam_ineq <= lmin + 1e-14 * (1 + abs(lmin)))]
                W.remove(min(cand))
                continue

            Ap = A @ p
            slack = b - A @ x
            in_w = np.zeros(L, dtype=bool)
            in_w[W] = True
            block = (~in_w) & (~eq) & (Ap > 1e-14 * (1.0 + np.abs(A).sum(axis=1)) * np.max(np.abs(p)))
            alpha, blocking = 1.0, None
            idx = np.flatnonzero(block)
            ratios = np.maximum(slack[idx], 0.0) / Ap[idx] if idx.size else idx
            while idx.size:
                rmin = ratios.min()
                if rmin >= 1.0:
                    break
                ties = idx[ratios <= rmin + 1e-15 * (1 + rmin)]
                cand = int(ties.min())
                # a row in the span of the working set only moves by the
                # roundoff-level correction; it cannot block
                if W and not _independent_of(A[W], A[cand]):
                    keep = idx != cand
                    idx, ratios = idx[keep], ratios[keep]
                    continue
                alpha, blocking = float(rmin), cand
                break
            x = x + alpha * p
            if blocking is not None:
                W.append(blocking)
        else:
            raise IllConditioned(f"active-set iteration limit {max_iter} reached")

        x, lam = self._polish(problem, W, x)
        sol = EquilibriumSolution(
            x=x,
            lam=lam,
            residuals=kkt_residuals(problem, x, lam),
            working_set=tuple(sorted(int(r) for r in W)),
            iterations=it,
            value=problem.potential(x),
        )
        if not residuals_ok(problem, sol, max(self.kkt_tol, 1e-8)):
            raise IllConditioned(f"KKT residuals above tolerance: {sol.residuals}")
        sol.Z, sol.Y, sol.W = extract_active_sets(problem, sol, self.act_tol)
        return sol

    def _starting_point(self, problem, x0, working_set, feas_tol) -> Array:
        A, b = problem.A, problem.b
        eq = problem.eq_mask
        self.last_phase1 = False

        def feasible(x):
            s = b - A @ x
            return np.all(s[~eq] >= -feas_tol[~eq]) and np.all(np.abs(s[eq]) <= feas_tol[eq])

        if x0 is not None and feasible(x0):
            return np.asarray(x0, dtype=float).copy()
        zero = np.zeros(problem.n_vars)
        if feasible(zero):
            return zero
        if working_set is not None:
            rows = sorted(set(problem.eq_rows.tolist()) | set(working_set))
            rows = [rows[i] for i in independent_rows(A[rows])]
            try:
                x_try, _ = _eqp_solve(problem.R, problem.c, A, b, rows)
                if feasible(x_try):
                    return x_try
            except np.linalg.LinAlgError:
                pass
        self.last_phase1 = True
        return phase1(problem)

    def _polish(self, problem, W, x):
        lam = np.zeros(problem.n_rows)
        try:
            x_new, lam_w = _eqp_solve(problem.R, problem.c, problem.A, problem.b, W)
        except np.linalg.LinAlgError as exc:
            raise IllConditioned("singular working-set system at the solution") from exc
        lam[W] = lam_w
        # clamp roundoff-level negative multipliers on inequality rows
        ineq_w = [k for k, r in enumerate(W) if not problem.eq_mask[r]]
        for k in ineq_w:
            if -self.kkt_tol <= lam[W[k]] < 0:
                lam[W[k]] = 0.0
        return x_new, lam


def _independent_of(AW, row, tol=1e-9):
    coef, *_ = np.linalg.lstsq(AW.T, row, rcond=None)
    return np.linalg.norm(AW.T @ coef - row) > tol * (1.0 + np.linalg.norm(row))


def _truncate_to_rank(W, eq, N):
    # at most N independent rows can be in the working set
    if len(W) <= N:
        return W
    eqs = [r for r in W if eq[r]]
    rest = [r for r in W if not eq[r]]
    return eqs + rest[: max(0, N - len(eqs))]


def _kkt_matrix(R, A, W):
    N = R.shape[0]
    k = len(W)
    K = np.zeros((N + k, N + k))
    K[:N, :N] = R
    if k:
        AW = A[W]
        K[:N, N:] = AW.T
        K[N:, :N] = AW
    return K


def _eqp_step(R, A, W, g, r):
    """Step ``p`` and multipliers of ``min 0.5 p'Rp + g'p  s.t.  A_W p = r``."""
    N = R.shape[0]
    K = _kkt_matrix(R, A, W)
    rhs = np.concatenate([-g, r])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned("singular working-set system") from exc
    return sol[:N], sol[N:]


def _eqp_solve(R, c, A, b, W):
    N = R.shape[0]
    K = _kkt_matrix(R, A, W)
    rhs = np.concatenate([-c, b[W] if len(W) else np.zeros(0)])
    sol = np.linalg.solve(K, rhs)
    return sol[:N], sol[N:]


def phase1(problem: QuadraticPotentialProblem) -> Array:
    """Feasible point by minimizing total constraint violation.

    Solves the elastic LP ``min sum(s) + sum(s+ + s-)`` with
    ``A_in x - s <= b_in`` and ``A_eq x + s+ - s- = b_eq``; a positive optimum
    means the feasible set is empty.
    """
    A, b = problem.A, problem.b
    eq = problem.eq_mask
    N = problem.n_vars
    Ai, bi = A[~eq], b[~eq]
    Ae, be = A[eq], b[eq]
    ni, ne = Ai.shape[0], Ae.shape[0]
    nv = N + ni + 2 * ne
    cost = np.concatenate([np.zeros(N), np.ones(ni + 2 * ne)])
    A_ub = np.hstack([Ai, -np.eye(ni), np.zeros((ni, 2 * ne))]) if ni else None
    A_eq = np.hstack([Ae, np.zeros((ne, ni)), np.eye(ne), -np.eye(ne)]) if ne else None
    bounds = [(None, None)] * N + [(0, None)] * (nv - N)
    res = linprog(cost, A_ub=A_ub, b_ub=bi if ni else None, A_eq=A_eq, b_eq=be if ne else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        raise IllConditioned(f"phase-1 LP failed: {res.message}")
    if res.fun > 1e-8 * (1.0 + np.abs(b).max(initial=0.0)):
        raise Infeasible(f"constraints are infeasible (total violation {res.fun:.3g})")
    return res.x[:N]


def extract_active_sets(
    problem: QuadraticPotentialProblem, sol: EquilibriumSolution, act_tol: float = DEFAULT_ACT_TOL
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tight rows ``Z``, zero-dual rows ``Y`` and their overlap ``W``.

    Equality rows are always in ``Z`` and never in ``Y``. An inequality row
    that is neither tight nor has a small dual (a complementarity violation
    above tolerance) is assigned by the smaller of its scaled slack and dual,
    so ``Z`` and ``Y`` always cover every inequality row.
    """
    eq = problem.eq_mask
    slack = problem.b - problem.A @ sol.x
    scaled = np.abs(slack) / (1.0 + np.abs(problem.b))
    tight = scaled <= act_tol
    zero_dual = sol.lam <= act_tol
    z_mask = eq | (tight & ~eq)
    y_mask = ~eq & zero_dual
    orphan = ~eq & ~z_mask & ~y_mask
    if np.any(orphan):
        to_z = orphan & (scaled <= sol.lam)
        z_mask |= to_z
        y_mask |= orphan & ~to_z
    Z = np.flatnonzero(z_mask)
    Y = np.flatnonzero(y_mask)
    W = np.flatnonzero(z_mask & y_mask & ~eq)
    return Z, Y, W


def solve_potential(
    problem: QuadraticPotentialProblem,
    tol: float = DEFAULT_KKT_TOL,
    act_tol: float = DEFAULT_ACT_TOL,
) -> EquilibriumSolution:
    """Nash equilibrium of the potential game: the unique minimizer of the potential."""
    return ActiveSetQP(kkt_tol=tol, act_tol=act_tol).solve(problem)


# (theta, mu, x, i) -> (H, q) with agent i's utility 0.5 y'Hy + q'y + const in its own strategy y
AgentUtility = Callable[[Array, Array, Array, int], tuple[Array, Array]]


def best_response_gap(
    form: AffineGameForm,
    theta: Array,
    mu: Array | None,
    x: Array,
    utility: AgentUtility | None = None,
    solver: ActiveSetQP | None = None,
) -> Array:
    """Per-agent improvement available by deviating unilaterally from ``x``.

    Without ``utility`` the agent objective is the potential restricted to the
    agent's block, which differs from the agent's utility by a term constant in
    its own strategy for an exact potential game.
    """
    problem = assemble(form, theta, mu)
    x = np.asarray(x, dtype=float)
    solver = solver or ActiveSetQP()
    gaps = np.zeros(form.n)
    for i in range(form.n):
        sl = form.agent_slice(i)
        if utility is None:
            H = problem.R[sl, sl]
            q = problem.R[sl] @ x - H @ x[sl] + problem.c[sl]
        else:
            H, q = utility(theta, mu, x, i)
        sub = _agent_subproblem(problem, form, i, x, H, q)
        try:
            br = solver.solve(sub, x0=x[sl])
        except Infeasible as exc:
            raise Infeasible(f"agent {i} subproblem infeasible") from exc
        xi = x[sl]
        gaps[i] = (0.5 * xi @ H @ xi + q @ xi) - br.value
    return gaps


def _agent_subproblem(problem, form, i, x, H, q):
    sl = form.agent_slice(i)
    rows = np.flatnonzero(form.row_agent == i)
    others = np.ones(problem.n_vars, dtype=bool)
    others[sl] = False
    A_own = problem.A[rows][:, sl]
    b_own = problem.b[rows] - problem.A[rows][:, others] @ x[others]
    active = np.any(A_own != 0, axis=1)
    eq_local = np.flatnonzero(np.isin(rows[active], problem.eq_rows))
    return QuadraticPotentialProblem(
        R=0.5 * (H + H.T), c=np.asarray(q, dtype=float), A=A_own[active], b=b_own[active],
        eq_rows=eq_local, n=1, m=form.m,
    )

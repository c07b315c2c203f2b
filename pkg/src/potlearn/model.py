"""Parametrized quadratic potential games.

A game is stored as an :class:`AffineGameForm`: every matrix or vector that
defines the potential problem is an affine function of the context vector
``mu``, and the potential Hessian and linear term are in addition affine in
the rationality parameters ``theta``::

    R(theta, mu) = R0(mu) + sum_i theta_i * R_i(mu)
    c(theta, mu) = c0(mu) + C(mu) @ theta

The feasible set ``A(mu) x <= b(mu)`` (rows listed in ``eq_rows`` hold with
equality) does not depend on ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

DEFAULT_ASSUMPTION_TOL = 1e-9


class DimensionError(ValueError):
    """Raised when an array does not have the shape its field requires."""

    def __init__(self, field_name: str, expected, got):
        self.field_name = field_name
        super().__init__(f"{field_name}: expected shape {expected}, got {got}")


@dataclass(frozen=True)
class AffineMap:
    """``mu -> const + sum_k mu[k] * coef[k]``; ``coef`` is None if constant."""

    const: Array
    coef: Array | None = None

    def __post_init__(self):
        object.__setattr__(self, "const", np.asarray(self.const, dtype=float))
        if self.coef is not None:
            coef = np.asarray(self.coef, dtype=float)
            if coef.shape[1:] != self.const.shape:
                raise DimensionError("coef", (None,) + self.const.shape, coef.shape)
            object.__setattr__(self, "coef", coef)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.const.shape

    @property
    def n_context(self) -> int | None:
        return None if self.coef is None else self.coef.shape[0]

    def __call__(self, mu: Array | None) -> Array:
        if self.coef is None:
            return self.const
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.coef.shape[0],):
            raise DimensionError("mu", (self.coef.shape[0],), mu.shape)
        return self.const + np.tensordot(mu, self.coef, axes=1)


@dataclass(frozen=True)
class Box:
    """Per-coordinate bounds describing the admissible parameter set."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError("box", lo.shape, hi.shape)
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, p: int) -> "Box":
        return cls(np.full(p, -np.inf), np.full(p, np.inf))

    def contains(self, theta: Array, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))


def project_theta(theta: Array, box: Box | None) -> Array:
    """Clamp ``theta`` coordinate-wise onto ``box`` (no-op when ``box`` is None)."""
    theta = np.asarray(theta, dtype=float)
    if box is None:
        return theta.copy()
    return np.clip(theta, box.lower, box.upper)


@dataclass(frozen=True)
class QuadraticPotentialProblem:
    """min 0.5 x'Rx + c'x  s.t.  A x <= b, with rows in ``eq_rows`` tight."""

    R: Array
    c: Array
    A: Array
    b: Array
    eq_rows: NDArray[np.int_] = field(default_factory=lambda: np.zeros(0, dtype=int))
    n: int = 1
    m: int = 1
    row_agent: NDArray[np.int_] | None = None

    def __post_init__(self):
        N = self.R.shape[0]
        if self.R.shape != (N, N):
            raise DimensionError("R", (N, N), self.R.shape)
        if self.c.shape != (N,):
            raise DimensionError("c", (N,), self.c.shape)
        if self.A.ndim != 2 or self.A.shape[1] != N:
            raise DimensionError("A", (None, N), self.A.shape)
        if self.b.shape != (self.A.shape[0],):
            raise DimensionError("b", (self.A.shape[0],), self.b.shape)
        object.__setattr__(self, "eq_rows", np.asarray(self.eq_rows, dtype=int))

    @property
    def n_vars(self) -> int:
        return self.R.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def eq_mask(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.n_rows, dtype=bool)
        mask[self.eq_rows] = True
        return mask

    @property
    def ineq_rows(self) -> NDArray[np.int_]:
        return np.flatnonzero(~self.eq_mask)

    def potential(self, x: Array) -> float:
        return float(0.5 * x @ self.R @ x + self.c @ x)

    def gradient(self, x: Array) -> Array:
        return self.R @ x + self.c


@dataclass(frozen=True)
class Datapoint:
    """An observed strategy profile ``x`` together with its context ``mu``."""

    x: Array
    mu: Array | None


@dataclass(frozen=True)
class AffineGameForm:
    """The ``(R, c, A, b)`` parameter maps of a potential game.

    ``Ri`` has shape ``(p, N, N)`` and ``C`` has shape ``(N, p)`` where
    ``N = n * m``. ``row_agent[r]`` names the agent owning constraint row
    ``r``; best-response computations keep only that agent's rows.
    """

    n: int
    m: int
    p: int
    R0: AffineMap
    Ri: AffineMap
    c0: AffineMap
    C: AffineMap
    A: AffineMap
    b: AffineMap
    eq_rows: NDArray[np.int_] = field(default_factory=lambda: np.zeros(0, dtype=int))
    row_agent: NDArray[np.int_] | None = None
    box: Box | None = None
    name: str = "game"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.n * self.m
        if self.n < 1 or self.m < 1:
            raise DimensionError("n, m", "positive", (self.n, self.m))
        if self.p < 1:
            raise DimensionError("p", ">= 1", self.p)
        checks = [
            ("R0", self.R0.shape, (N, N)),
            ("Ri", self.Ri.shape, (self.p, N, N)),
            ("c0", self.c0.shape, (N,)),
            ("C", self.C.shape, (N, self.p)),
        ]
        for name, got, expected in checks:
            if got != expected:
                raise DimensionError(name, expected, got)
        if len(self.A.shape) != 2 or self.A.shape[1] != N:
            raise DimensionError("A", (None, N), self.A.shape)
        L = self.A.shape[0]
        if self.b.shape != (L,):
            raise DimensionError("b", (L,), self.b.shape)
        eq = np.asarray(self.eq_rows, dtype=int)
        if eq.size and (eq.min() < 0 or eq.max() >= L):
            raise DimensionError("eq_rows", f"indices in [0, {L})", eq.tolist())
        object.__setattr__(self, "eq_rows", eq)
        if self.row_agent is None:
            object.__setattr__(self, "row_agent", _infer_row_agent(self.A.const, self.n, self.m))
        else:
            ra = np.asarray(self.row_agent, dtype=int)
            if ra.shape != (L,):
                raise DimensionError("row_agent", (L,), ra.shape)
            object.__setattr__(self, "row_agent", ra)
        if self.box is not None and self.box.lower.shape != (self.p,):
            raise DimensionError("box", (self.p,), self.box.lower.shape)
        ks = {mp.n_context for mp in (self.R0, self.Ri, self.c0, self.C, self.A, self.b)}
        ks.discard(None)
        if len(ks) > 1:
            raise DimensionError("context maps", "a common context length", sorted(ks))
        object.__setattr__(self, "_k", ks.pop() if ks else 0)

    @property
    def n_vars(self) -> int:
        return self.n * self.m

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        """Context vector length (0 when nothing depends on ``mu``)."""
        return self._k

    def agent_slice(self, i: int) -> slice:
        return slice(i * self.m, (i + 1) * self.m)


def _infer_row_agent(A: Array, n: int, m: int) -> NDArray[np.int_]:
    # owner = agent holding the first nonzero coefficient of the row
    owners = np.zeros(A.shape[0], dtype=int)
    for r, row in enumerate(A):
        nz = np.flatnonzero(row)
        owners[r] = nz[0] // m if nz.size else 0
    return owners


def _check_theta(form: AffineGameForm, theta: Array) -> Array:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (form.p,):
        raise DimensionError("theta", (form.p,), theta.shape)
    return theta


def assemble(form: AffineGameForm, theta: Array, mu: Array | None) -> QuadraticPotentialProblem:
    """Evaluate the potential problem at ``(theta, mu)``."""
    theta = _check_theta(form, theta)
    if form.k and (mu is None or np.shape(mu) != (form.k,)):
        raise DimensionError("mu", (form.k,), np.shape(mu))
    R = form.R0(mu) + np.tensordot(theta, form.Ri(mu), axes=1)
    c = form.c0(mu) + form.C(mu) @ theta
    return QuadraticPotentialProblem(
        R=0.5 * (R + R.T),
        c=c,
        A=form.A(mu),
        b=form.b(mu),
        eq_rows=form.eq_rows,
        n=form.n,
        m=form.m,
        row_agent=form.row_agent,
    )


def partials(form: AffineGameForm, j: int, mu: Array | None) -> tuple[Array, Array]:
    """Derivatives of ``(R, c)`` with respect to ``theta[j]``; A and b are constant in theta."""
    if not 0 <= j < form.p:
        raise IndexError(f"parameter index {j} out of range for p={form.p}")
    return form.Ri(mu)[j], form.C(mu)[:, j]


@dataclass
class AssumptionReport:
    """Outcome of :func:`check_assumptions`.

    ``convex`` covers the definiteness checks (unique equilibria, nonsingular
    active-set systems); ``licq`` the constraint-qualification spot checks.
    ``passed`` requires both.
    """

    passed: bool
    messages: list[str]
    warnings: list[str]
    contexts: list[dict]
    convex: bool = True
    licq: bool = True

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        lines = [f"assumptions: {status}"]
        lines += [f"  error: {msg}" for msg in self.messages]
        lines += [f"  warning: {msg}" for msg in self.warnings]
        return "\n".join(lines)


def independent_rows(rows: Array, tol: float = 1e-10) -> list[int]:
    """Greedy maximal linearly independent subset of ``rows`` (in order)."""
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        return []
    Q = np.zeros((min(rows.shape), rows.shape[1]))
    k = 0
    keep = []
    norms = np.linalg.norm(rows, axis=1)
    for r in range(rows.shape[0]):
        if norms[r] == 0.0 or k == Q.shape[0]:
            continue
        v = rows[r] / norms[r]
        # two Gram-Schmidt passes keep Q orthonormal to working precision
        v = v - Q[:k].T @ (Q[:k] @ v)
        v = v - Q[:k].T @ (Q[:k] @ v)
        res = np.linalg.norm(v)
        if res > tol:
            Q[k] = v / res
            k += 1
            keep.append(r)
    return keep


def _effective_base(form: AffineGameForm, mu) -> tuple[Array, list[str]]:
    # For theta in the box, R(theta) = R0 + sum lo_i R_i + sum (theta_i - lo_i) R_i,
    # so with PSD R_i the shifted base bounds R(theta) from below.
    R0 = form.R0(mu)
    Ri = form.Ri(mu)
    notes = []
    if form.box is None:
        return R0, notes
    base = R0.copy()
    for i in range(form.p):
        lo = form.box.lower[i]
        if not np.any(Ri[i]):
            continue
        if np.isfinite(lo):
            base = base + lo * Ri[i]
        else:
            notes.append(f"theta[{i}] has no lower bound but R_{i} is nonzero")
    return base, notes


def check_assumptions(
    form: AffineGameForm,
    mus: Sequence[Array | None],
    tol: float = DEFAULT_ASSUMPTION_TOL,
    n_points: int = 5,
    rng: np.random.Generator | None = None,
) -> AssumptionReport:
    """Spot-check convexity, LICQ and boundedness over a sample of contexts.

    R0 is checked after absorbing the box lower bounds (see ``_effective_base``),
    so a game with ``R0 = 0`` passes when every parameter multiplying a nonzero
    ``R_i`` is bounded below by a positive constant.
    """
    if len(mus) == 0:
        raise ValueError("check_assumptions needs at least one context")
    rng = np.random.default_rng(0) if rng is None else rng
    messages: list[str] = []
    warnings: list[str] = []
    contexts = []
    convex = licq = True
    from potlearn.qp import ActiveSetQP, Infeasible

    for ci, mu in enumerate(mus):
        info: dict = {"context": ci}
        base, notes = _effective_base(form, mu)
        messages += [f"context {ci}: {n}" for n in notes]
        convex &= not notes
        min_eig0 = float(np.linalg.eigvalsh(0.5 * (base + base.T)).min())
        info["min_eig_R0"] = min_eig0
        if min_eig0 <= tol:
            messages.append(f"context {ci}: R0 not positive definite (min eigenvalue {min_eig0:.3g})")
            convex = False
        Ri = form.Ri(mu)
        info["min_eig_Ri"] = []
        for i in range(form.p):
            e = float(np.linalg.eigvalsh(0.5 * (Ri[i] + Ri[i].T)).min())
            info["min_eig_Ri"].append(e)
            if e < -tol:
                messages.append(f"context {ci}: R_{i} not positive semidefinite (min eigenvalue {e:.3g})")
                convex = False

        A, b = form.A(mu), form.b(mu)
        for r1, r2 in _parallel_row_pairs(A, b):
            messages.append(f"context {ci}: LICQ fails, rows {r1} and {r2} are parallel")
            licq = False

        # random feasible points: projections of random targets onto the feasible set
        N = form.n_vars
        prob = QuadraticPotentialProblem(np.eye(N), np.zeros(N), A, b, form.eq_rows, form.n, form.m)
        solver = ActiveSetQP()
        licq_ok = True
        for _ in range(n_points):
            target = rng.normal(size=N) * (1.0 + np.abs(b).max(initial=0.0))
            p_ = QuadraticPotentialProblem(prob.R, -target, A, b, form.eq_rows, form.n, form.m)
            try:
                sol = solver.solve(p_)
            except Infeasible:
                messages.append(f"context {ci}: feasible set is empty")
                licq_ok = False
                convex = False
                break
            slack = b - A @ sol.x
            active = np.flatnonzero((np.abs(slack) <= 1e-7 * (1 + np.abs(b))) | prob.eq_mask)
            if len(independent_rows(A[active], tol=1e-8)) < active.size:
                messages.append(f"context {ci}: LICQ fails at a sampled feasible point (active rows {active.tolist()})")
                licq_ok = False
                break
        info["licq"] = licq_ok
        licq &= licq_ok

        eq = prob.eq_mask
        has_upper = np.any((A > 0) | (eq[:, None] & (A != 0)), axis=0)
        has_lower = np.any((A < 0) | (eq[:, None] & (A != 0)), axis=0)
        unbounded = np.flatnonzero(~(has_upper & has_lower))
        info["unbounded_vars"] = unbounded.tolist()
        if unbounded.size:
            warnings.append(f"context {ci}: variables {unbounded.tolist()} lack a bound on one side")
        contexts.append(info)

    return AssumptionReport(passed=not messages, messages=messages, warnings=warnings, contexts=contexts,
                            convex=convex, licq=licq)


def _parallel_row_pairs(A: Array, b: Array) -> list[tuple[int, int]]:
    aug = np.column_stack([A, b])
    norms = np.linalg.norm(aug, axis=1)
    ok = (norms > 0) & (np.linalg.norm(A, axis=1) > 0)
    U = np.zeros_like(aug)
    U[ok] = aug[ok] / norms[ok, None]
    cos = np.abs(U @ U.T)
    i, j = np.nonzero(np.triu(cos > 1 - 1e-12, k=1))
    return list(zip(i.tolist(), j.tolist()))

"""Stochastic active-set training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from potlearn.diffgrad import SingularSystem, implied_rows, loss_and_grad, reduce_dependent_rows
from potlearn.games import Dataset
from potlearn.model import AffineGameForm, Array, Datapoint, assemble, check_assumptions, project_theta
from potlearn.qp import DEFAULT_ACT_TOL, DEFAULT_KKT_TOL, ActiveSetQP, best_response_gap
from potlearn.rules import DEFAULT_MAX_TRIES, DegeneracyEvent, default_epsilon, rule1_partition, rule2_perturb

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "sqrt", "linear")
CSV_COLUMNS = ["iter", "train_loss", "test_error", "step_size", "grad_norm", "degenerate", "clip", "wall_ms"]
GRAD_CLIP = 1e3


@dataclass
class TrainConfig:
    T: int = 2000
    eta0: float = 0.1
    schedule: str = "sqrt"
    seed: int = 0
    act_tol: float = DEFAULT_ACT_TOL
    kkt_tol: float = DEFAULT_KKT_TOL
    rule: str = "rule1"
    epsilon: float | None = None  # None: 1e-3 * (1 + |theta|)
    max_tries: int = DEFAULT_MAX_TRIES
    eval_every: int = 10
    theta_init: Sequence[float] | None = None  # None: standard normal draw
    batch_size: int = 1
    grad_clip: float = GRAD_CLIP
    check_assumptions: bool = True
    check_nash: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.rule not in ("rule1", "rule2"):
            raise ValueError("rule must be 'rule1' or 'rule2'")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def step_size(t: int, config: TrainConfig) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    if config.schedule == "constant":
        return float(config.eta0)
    if config.schedule == "sqrt":
        return float(config.eta0 / np.sqrt(t + 1))
    return float(config.eta0 / (t + 1))


@dataclass
class IterRecord:
    iter: int
    train_loss: float
    test_error: float
    step_size: float
    grad_norm: float
    degenerate: int
    clip: int
    wall_ms: float


@dataclass
class RunLog:
    records: list[IterRecord] = field(default_factory=list)
    theta_final: Array | None = None
    checkpoints: list[tuple[int, list[float]]] = field(default_factory=list)
    events: list[DegeneracyEvent] = field(default_factory=list)
    projection_clips: int = 0
    rule2_fallbacks: int = 0
    licq_reductions: int = 0
    nash_gaps: list[float] = field(default_factory=list)
    final_test_error: float = float("nan")
    phase_ms: dict = field(default_factory=lambda: {"solve": 0.0, "gradient": 0.0, "evaluate": 0.0})

    def to_csv(self, wall_time: bool = False) -> str:
        """Metrics CSV. ``wall_ms`` is left blank unless ``wall_time`` so the file is reproducible."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([
                r.iter, repr(r.train_loss), repr(r.test_error), repr(r.step_size), repr(r.grad_norm),
                r.degenerate, r.clip, f"{r.wall_ms:.3f}" if wall_time else "",
            ])
        return buf.getvalue()

    def test_errors(self) -> np.ndarray:
        return np.array([r.test_error for r in self.records])


class _WarmStarts:
    """Previous solution per datapoint; the feasible set never depends on theta."""

    def __init__(self, solver: ActiveSetQP):
        self.solver = solver
        self.cache: dict = {}

    def solve(self, form, theta, dp: Datapoint, key):
        problem = assemble(form, theta, dp.mu)
        prev = self.cache.get(key)
        if prev is None:
            sol = self.solver.solve(problem)
        else:
            sol = self.solver.solve(problem, x0=prev[0], working_set=prev[1])
        self.cache[key] = (sol.x, sol.working_set)
        return problem, sol


def evaluate_test_error(form: AffineGameForm, theta: Array, testset: Sequence[Datapoint], warm: _WarmStarts | None = None) -> float:
    """Root mean squared distance between induced equilibria and the observations."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    warm = warm or _WarmStarts(ActiveSetQP())
    total = 0.0
    for k, dp in enumerate(testset):
        _, sol = warm.solve(form, theta, dp, ("test", k))
        total += float(np.sum((sol.x - dp.x) ** 2))
    return float(np.sqrt(total / len(testset)))


def full_loss(form: AffineGameForm, theta: Array, points: Sequence[Datapoint], warm: _WarmStarts | None = None) -> float:
    """Mean squared equilibrium distance over ``points`` using full equilibrium solves."""
    warm = warm or _WarmStarts(ActiveSetQP())
    total = 0.0
    for k, dp in enumerate(points):
        _, sol = warm.solve(form, theta, dp, ("loss", k))
        total += float(np.sum((sol.x - dp.x) ** 2))
    return total / len(points)


def train(
    form: AffineGameForm,
    dataset: Dataset,
    config: TrainConfig,
    utility: Callable | None = None,
    progress: Callable[[int, IterRecord], None] | None = None,
) -> tuple[Array, RunLog]:
    """Learn theta by stochastic gradient steps through exact equilibria.

    Every iteration draws a datapoint uniformly, solves the potential problem
    at the current theta, reads off the active sets, resolves degeneracy
    (random partition, or a perturbed parameter under ``rule2``), takes the
    implicit gradient for that active set and projects the step onto the box.
    ``utility`` supplies per-agent utilities for the optional Nash-gap audit.
    """
    train_pts = dataset.train
    test_pts = dataset.test
    if not train_pts:
        raise ValueError("dataset has no training points")
    if config.check_assumptions:
        sample = [dp.mu for dp in train_pts[:5]]
        report = check_assumptions(form, sample)
        if not report.convex:
            raise ValueError(f"game violates modelling assumptions:\n{report}")
        if not report.licq:
            # dependent tight rows are pruned before every gradient solve
            log.warning("LICQ spot check failed; redundant active rows will be reduced")

    rng = np.random.default_rng(config.seed)
    if config.theta_init is None:
        theta0 = rng.standard_normal(form.p)
    else:
        theta0 = np.asarray(config.theta_init, dtype=float)
        if theta0.shape != (form.p,):
            raise ValueError(f"theta_init must have length {form.p}")
    theta = project_theta(theta0, form.box)
    runlog = RunLog()
    if not np.array_equal(theta, theta0):
        runlog.projection_clips += 1

    solver = ActiveSetQP(kkt_tol=config.kkt_tol, act_tol=config.act_tol)
    warm = _WarmStarts(solver)
    eval_warm = _WarmStarts(ActiveSetQP(kkt_tol=config.kkt_tol, act_tol=config.act_tol))
    window_degenerate = 0
    window_clip = 0
    t_start = time.perf_counter()

    for t in range(config.T):
        eta = step_size(t, config)
        picks = rng.integers(len(train_pts), size=config.batch_size)
        grad = np.zeros(form.p)
        batch_loss = 0.0
        for k in picks:
            k = int(k)
            dp = train_pts[k]
            t0 = time.perf_counter()
            problem, sol = warm.solve(form, theta, dp, k)
            runlog.phase_ms["solve"] += 1e3 * (time.perf_counter() - t0)
            if config.check_nash:
                runlog.nash_gaps.append(float(best_response_gap(form, theta, dp.mu, sol.x, utility).max()))
            batch_loss += float(np.sum((sol.x - dp.x) ** 2))

            t0 = time.perf_counter()
            g, degenerate = _datapoint_gradient(form, theta, dp, problem, sol, t, k, config, rng, runlog)
            runlog.phase_ms["gradient"] += 1e3 * (time.perf_counter() - t0)
            window_degenerate += degenerate
            grad += g
        grad /= config.batch_size
        batch_loss /= config.batch_size

        gnorm = float(np.linalg.norm(grad))
        if gnorm > config.grad_clip:
            grad *= config.grad_clip / gnorm
            window_clip += 1
            log.info("iteration %d: gradient norm %.3g clipped", t, gnorm)

        if t % config.eval_every == 0 or t == config.T - 1:
            t0 = time.perf_counter()
            test_err = evaluate_test_error(form, theta, test_pts, eval_warm) if test_pts else float("nan")
            runlog.phase_ms["evaluate"] += 1e3 * (time.perf_counter() - t0)
            rec = IterRecord(
                iter=t, train_loss=batch_loss, test_error=test_err, step_size=eta, grad_norm=gnorm,
                degenerate=window_degenerate, clip=window_clip,
                wall_ms=1e3 * (time.perf_counter() - t_start),
            )
            runlog.records.append(rec)
            runlog.checkpoints.append((t, theta.tolist()))
            window_degenerate = window_clip = 0
            if progress is not None:
                progress(t, rec)

        stepped = theta - eta * grad
        theta = project_theta(stepped, form.box)
        if not np.array_equal(theta, stepped):
            runlog.projection_clips += 1

    runlog.theta_final = theta
    if test_pts:
        runlog.final_test_error = evaluate_test_error(form, theta, test_pts, eval_warm)
    runlog.checkpoints.append((config.T, theta.tolist()))
    return theta, runlog


def _datapoint_gradient(form, theta, dp, problem, sol, t, k, config, rng, runlog):
    """Gradient for one datapoint; returns ``(gradient, 1 if degenerate else 0)``."""
    implied = implied_rows(problem, sol.Z, sol.W)
    if implied.size:
        # tight zero-dual rows implied by the other tight rows are not a real degeneracy
        sol.Y = np.setdiff1d(sol.Y, implied)
        sol.W = np.setdiff1d(sol.W, implied)
    if sol.W.size == 0:
        return _grad_or_partition(form, theta, dp, problem, sol, t, k, rng, runlog, record=False), 0

    if config.rule == "rule2":
        eps = config.epsilon or default_epsilon(theta)
        for attempt in range(config.max_tries):
            sample = rule2_perturb(theta, eps, rng)
            theta_tilde = project_theta(sample, form.box)
            p_tilde = assemble(form, theta_tilde, dp.mu)
            s_tilde = ActiveSetQP(config.kkt_tol, config.act_tol).solve(p_tilde, x0=sol.x, working_set=sol.working_set)
            s_tilde.W = np.setdiff1d(s_tilde.W, implied_rows(p_tilde, s_tilde.Z, s_tilde.W))
            if s_tilde.W.size == 0:
                runlog.events.append(DegeneracyEvent(
                    t, k, sol.W.tolist(), "rule2",
                    {"theta_tilde": theta_tilde.tolist(), "tries": attempt + 1,
                     "projected": not np.array_equal(sample, theta_tilde)},
                ))
                g = _grad_or_partition(form, theta_tilde, dp, p_tilde, s_tilde, t, k, rng, runlog, record=False)
                return g, 1
        runlog.rule2_fallbacks += 1
    return _grad_or_partition(form, theta, dp, problem, sol, t, k, rng, runlog, record=True), 1


def _grad_or_partition(form, theta, dp, problem, sol, t, k, rng, runlog, record):
    Z = sol.Z
    if sol.W.size:
        Z, _, W1 = rule1_partition(sol.Z, sol.Y, rng)
        if record:
            runlog.events.append(DegeneracyEvent(t, k, sol.W.tolist(), "rule1", {"removed_from_Z": W1.tolist()}))
    n_dep = _count_dependent(problem, Z)
    if n_dep:
        runlog.licq_reductions += 1
    try:
        _, g, _ = loss_and_grad(form, theta, Z, dp, lam_hint=sol.lam)
    except SingularSystem as exc:
        raise SingularSystem(f"iteration {t}: {exc}", datapoint=k) from exc
    return g


def _count_dependent(problem, Z) -> int:
    return len(reduce_dependent_rows(problem, Z)[2])


def summary_dict(theta: Array, runlog: RunLog, config: TrainConfig, extra: dict | None = None) -> dict:
    out = {
        "theta_final": [float(v) for v in theta],
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "seed": config.seed,
        "iterations": config.T,
        "records": len(runlog.records),
        "degeneracy_events": len(runlog.events),
        "degeneracy_by_rule": {r: sum(e.rule_used == r for e in runlog.events) for r in ("rule1", "rule2")},
        "rule2_fallbacks": runlog.rule2_fallbacks,
        "projection_clips": runlog.projection_clips,
        "licq_reductions": runlog.licq_reductions,
        "final_test_error": runlog.final_test_error,
    }
    if config.theta_init is not None:
        out["config"]["theta_init"] = [float(v) for v in config.theta_init]
    if extra:
        out.update(extra)
    return out

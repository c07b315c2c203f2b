"""Cournot and congestion games, plus synthetic equilibrium datasets.

Context layouts:

* Cournot: ``mu = (c_1, ..., c_n)``, the unit production costs.
* Congestion: ``mu = (d_1, ..., d_n)``, the demand each agent routes from its
  source to its sink. Sources and sinks are fixed by the :class:`CongestionSpec`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from potlearn.model import AffineGameForm, AffineMap, Array, Box, Datapoint, assemble
from potlearn.qp import ActiveSetQP

PARAM_FLOOR = 1e-3


# --------------------------------------------------------------------------- Cournot


@dataclass
class CournotSpec:
    n: int
    theta_true: Array  # (a, b): inverse demand a - b * sum(x)

    def __post_init__(self):
        self.theta_true = np.asarray(self.theta_true, dtype=float)
        if self.n < 2:
            raise ValueError("a Cournot game needs at least two agents")
        if self.theta_true[1] <= 0:
            raise ValueError("Cournot slope b must be positive")

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "CournotSpec":
        theta = np.abs(rng.normal(size=2))
        theta[1] = max(theta[1], PARAM_FLOOR)
        return cls(n, theta)

    def sample_context(self, rng: np.random.Generator) -> Array:
        return np.abs(rng.normal(size=self.n))


def cournot_form(n: int) -> AffineGameForm:
    """Cournot competition with ``theta = (a, b)`` and quantities ``x >= 0``.

    Potential ``c'x + b * sum(x_i^2) + b * sum_{i<j} x_i x_j - a * sum(x)``,
    i.e. ``R = b (I + J)`` and ``c = mu - a 1``.
    """
    if n < 2:
        raise ValueError("a Cournot game needs at least two agents")
    I = np.eye(n)
    Ri = np.stack([np.zeros((n, n)), I + np.ones((n, n))])
    C = np.column_stack([-np.ones(n), np.zeros(n)])
    return AffineGameForm(
        n=n,
        m=1,
        p=2,
        R0=AffineMap(np.zeros((n, n))),
        Ri=AffineMap(Ri),
        c0=AffineMap(np.zeros(n), coef=I.copy()),
        C=AffineMap(C),
        A=AffineMap(-I),
        b=AffineMap(np.zeros(n)),
        row_agent=np.arange(n),
        box=Box(np.array([-np.inf, PARAM_FLOOR]), np.array([np.inf, np.inf])),
        name="cournot",
        meta={"theta_names": ["a", "b"]},
    )


def cournot_utility(theta: Array, mu: Array, x: Array, i: int) -> tuple[Array, Array]:
    """Agent ``i``'s cost ``-(a - b sum(x)) x_i + c_i x_i`` as ``0.5 H y^2 + q y``."""
    a, b = theta
    others = np.sum(x) - x[i]
    return np.array([[2.0 * b]]), np.array([b * others - a + mu[i]])


def cournot_utility_grad(theta: Array, mu: Array, x: Array) -> Array:
    """Stacked ``d u_i / d x_i`` for all agents."""
    a, b = theta
    return b * np.sum(x) + b * x - a + mu


# ------------------------------------------------------------------------ congestion


@dataclass
class CongestionSpec:
    n_nodes: int
    edges: list[tuple[int, int]]
    L: Array  # (|E|, p) nonnegative edge factors; edge costs are L @ theta
    commodities: list[tuple[int, int]]  # (source, sink) per agent
    theta_true: Array

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        self.theta_true = np.asarray(self.theta_true, dtype=float)
        self.edges = [(int(u), int(v)) for u, v in self.edges]
        self.commodities = [(int(s), int(t)) for s, t in self.commodities]
        if self.L.shape[0] != len(self.edges):
            raise ValueError("L needs one row per edge")
        if np.any(self.L < 0):
            raise ValueError("edge factors must be nonnegative")
        for s, t in self.commodities:
            if s == t or t not in reachable(self.n_nodes, self.edges, s):
                raise ValueError(f"commodity ({s}, {t}) is not connected")

    @property
    def n(self) -> int:
        return len(self.commodities)

    @property
    def p(self) -> int:
        return self.L.shape[1]

    def theta_floor(self) -> float:
        """Per-coordinate lower bound keeping every edge cost at least PARAM_FLOOR."""
        rowsum = self.L.sum(axis=1)
        if np.any(rowsum <= 0):
            raise ValueError("every edge needs a positive factor")
        return PARAM_FLOOR / float(rowsum.min())

    def sample_context(self, rng: np.random.Generator) -> Array:
        return np.abs(rng.normal(size=self.n))

    @classmethod
    def random(cls, n_nodes: int, p_edge: float, n_agents: int, p: int, rng: np.random.Generator,
               max_resamples: int = 1000) -> "CongestionSpec":
        for _ in range(max_resamples):
            edges = erdos_renyi(n_nodes, p_edge, rng)
            commodities = _sample_commodities(n_nodes, edges, n_agents, rng)
            if commodities is not None:
                break
        else:
            raise RuntimeError("could not sample a graph connecting every commodity")
        L = np.abs(rng.normal(size=(len(edges), p)))
        L /= np.linalg.norm(L, axis=0)
        spec = cls(n_nodes, edges, L, commodities, np.ones(p))
        spec.theta_true = np.maximum(np.abs(rng.normal(size=p)), spec.theta_floor())
        return spec


def reachable(n_nodes: int, edges: Sequence[tuple[int, int]], source: int, reverse: bool = False) -> set[int]:
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    for u, v in edges:
        if reverse:
            adj[v].append(u)
        else:
            adj[u].append(v)
    seen = {source}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def erdos_renyi(
    n_nodes: int,
    p_edge: float,
    rng: np.random.Generator,
    required_pairs: Sequence[tuple[int, int]] = (),
    max_resamples: int = 1000,
) -> list[tuple[int, int]]:
    """Directed G(n, p): every ordered pair is an edge with probability ``p_edge``.

    Resamples until each ``(s, t)`` in ``required_pairs`` has a directed path.
    """
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    if not 0 < p_edge <= 1:
        raise ValueError("p_edge must lie in (0, 1]")
    pairs = [(u, v) for u in range(n_nodes) for v in range(n_nodes) if u != v]
    for _ in range(max_resamples):
        keep = rng.random(len(pairs)) < p_edge
        edges = [e for e, k in zip(pairs, keep) if k]
        if all(t in reachable(n_nodes, edges, s) for s, t in required_pairs):
            return edges
    raise RuntimeError(f"no connected sample in {max_resamples} draws")


def _sample_commodities(n_nodes, edges, n_agents, rng):
    options = [(s, t) for s in range(n_nodes) for t in reachable(n_nodes, edges, s) if t != s]
    if not options:
        return None
    picks = rng.integers(len(options), size=n_agents)
    return [options[k] for k in picks]


def congestion_form(spec: CongestionSpec) -> AffineGameForm:
    """Nonatomic congestion game with edge costs ``C = L theta``.

    Variables ``x[i * |E| + e]`` are agent ``i``'s flow on edge ``e``. Each edge
    contributes the Hessian block ``C_e (I + J)`` over agents. Per agent the
    rows are: ``-x_ie <= 0`` for edges on some source-sink path, ``x_ie = 0``
    for the other edges (they carry no flow at any equilibrium since costs
    are positive), and flow conservation at every node on a source-sink path
    except the sink (the dropped row is implied by the others).
    """
    n, E, p = spec.n, len(spec.edges), spec.p
    N = n * E
    block = np.eye(n) + np.ones((n, n))
    Ri = np.zeros((p, N, N))
    idx = np.arange(n) * E
    for e in range(E):
        cells = np.ix_(idx + e, idx + e)
        for j in range(p):
            Ri[j][cells] += spec.L[e, j] * block

    rows, b_const, b_coef, eq_rows, owner = [], [], [], [], []

    def add(row, eq, agent, supply_of=None):
        if eq:
            eq_rows.append(len(rows))
        rows.append(row)
        b_const.append(0.0)
        coef = np.zeros(n)
        if supply_of is not None:
            coef[supply_of] = 1.0
        b_coef.append(coef)
        owner.append(agent)

    for i, (s, t) in enumerate(spec.commodities):
        fwd = reachable(spec.n_nodes, spec.edges, s)
        bwd = reachable(spec.n_nodes, spec.edges, t, reverse=True)
        if t not in fwd:
            raise ValueError(f"commodity ({s}, {t}) is not connected")
        useful_nodes = fwd & bwd
        for e, (u, v) in enumerate(spec.edges):
            row = np.zeros(N)
            if u in fwd and v in bwd:
                row[i * E + e] = -1.0
                add(row, False, i)
            else:
                row[i * E + e] = 1.0
                add(row, True, i)
        for node in sorted(useful_nodes - {t}):
            row = np.zeros(N)
            for e, (u, v) in enumerate(spec.edges):
                if u == node:
                    row[i * E + e] += 1.0
                if v == node:
                    row[i * E + e] -= 1.0
            add(row, True, i, supply_of=i if node == s else None)

    lo = spec.theta_floor()
    return AffineGameForm(
        n=n,
        m=E,
        p=p,
        R0=AffineMap(np.zeros((N, N))),
        Ri=AffineMap(Ri),
        c0=AffineMap(np.zeros(N)),
        C=AffineMap(np.zeros((N, p))),
        A=AffineMap(np.array(rows)),
        b=AffineMap(np.array(b_const), coef=np.array(b_coef).T.copy()),
        eq_rows=np.array(eq_rows, dtype=int),
        row_agent=np.array(owner, dtype=int),
        box=Box(np.full(p, lo), np.full(p, np.inf)),
        name="congestion",
        meta={
            "n_nodes": spec.n_nodes,
            "edges": [list(e) for e in spec.edges],
            "L": spec.L.tolist(),
            "commodities": [list(c) for c in spec.commodities],
        },
    )


def _edge_costs(form: AffineGameForm, theta: Array) -> Array:
    return np.asarray(form.meta["L"], dtype=float) @ theta


def congestion_utility(form: AffineGameForm) -> Callable:
    """Agent utility ``sum_e C_e y_e (y_e + sum_{j != i} x_je)`` as ``(H, q)``."""
    n, E = form.n, form.m

    def utility(theta, mu, x, i):
        C = _edge_costs(form, theta)
        flows = x.reshape(n, E)
        others = flows.sum(axis=0) - flows[i]
        return np.diag(2.0 * C), C * others

    return utility


def congestion_utility_grad(form: AffineGameForm, theta: Array, x: Array) -> Array:
    """Stacked ``d u_i / d x_ie = C_e (sum_j x_je + x_ie)``."""
    C = _edge_costs(form, theta)
    flows = x.reshape(form.n, form.m)
    return (C * (flows.sum(axis=0) + flows)).ravel()


def game_utility(form: AffineGameForm) -> Callable | None:
    """Per-agent utility model for the built-in games, None for anything else."""
    if form.name == "cournot":
        return cournot_utility
    if form.name == "congestion":
        return congestion_utility(form)
    return None


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    points: list[Datapoint]
    sigma: float
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        both = np.concatenate([self.train_idx, self.test_idx])
        if sorted(both.tolist()) != list(range(len(self.points))):
            raise ValueError("train/test split must be disjoint and cover every point")

    @property
    def train(self) -> list[Datapoint]:
        return [self.points[k] for k in self.train_idx]

    @property
    def test(self) -> list[Datapoint]:
        return [self.points[k] for k in self.test_idx]


def generate_dataset(
    form: AffineGameForm,
    theta_true: Array,
    context_sampler: Callable[[np.random.Generator], Array],
    K: int,
    sigma: float,
    rng: np.random.Generator,
    test_fraction: float = 0.1,
) -> Dataset:
    """Noisy equilibria ``xbar = x*(theta_true, mu) + N(0, sigma^2 I)`` at sampled contexts.

    Each datapoint draws from its own child generator, so the result does not
    depend on the order in which points are produced.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    theta_true = np.asarray(theta_true, dtype=float)
    children = rng.spawn(K)
    solver = ActiveSetQP()
    points = []
    for child in children:
        mu = np.asarray(context_sampler(child), dtype=float)
        x = solver.solve(assemble(form, theta_true, mu)).x
        noise = child.normal(scale=sigma, size=x.size) if sigma > 0 else np.zeros(x.size)
        points.append(Datapoint(x=x + noise, mu=mu))
    n_test = int(round(test_fraction * K))
    if K > 1:
        n_test = min(max(n_test, 1), K - 1) if test_fraction > 0 else 0
    else:
        n_test = 0
    perm = rng.permutation(K)
    return Dataset(
        points=points,
        sigma=float(sigma),
        train_idx=np.sort(perm[n_test:]),
        test_idx=np.sort(perm[:n_test]),
        meta={"game": form.name, "n": form.n, "m": form.m, "p": form.p, "theta_true": theta_true.tolist()},
    )

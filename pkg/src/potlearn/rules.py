"""Degenerate active sets: random partition and parameter perturbation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from potlearn.model import Array

DEFAULT_MAX_TRIES = 8


def default_epsilon(theta: Array) -> float:
    return 1e-3 * (1.0 + float(np.linalg.norm(theta)))


@dataclass
class DegeneracyEvent:
    iteration: int
    datapoint: int
    W: list[int]
    rule_used: str
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.W:
            raise ValueError("a degeneracy event needs a nonempty W")


def rule1_partition(Z, Y, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``W = Z & Y`` by independent fair coin flips.

    Rows landing in W1 leave Z, rows in W2 leave Y. Returns ``(Z', Y', W1)``.
    """
    Z = np.asarray(Z, dtype=int)
    Y = np.asarray(Y, dtype=int)
    W = np.intersect1d(Z, Y)
    if W.size == 0:
        raise ValueError("rule1_partition called with an empty degenerate set")
    to_w1 = rng.random(W.size) < 0.5
    W1, W2 = W[to_w1], W[~to_w1]
    return np.setdiff1d(Z, W1), np.setdiff1d(Y, W2), W1


def rule2_perturb(theta: Array, epsilon: float, rng: np.random.Generator) -> Array:
    """Uniform sample from the Euclidean ball of radius ``epsilon`` around ``theta``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    direction = rng.normal(size=p)
    direction /= np.linalg.norm(direction)
    radius = epsilon * rng.random() ** (1.0 / p)
    return theta + radius * direction

"""Sample-quality metrics: exact W2^2, unsafe mass, two-sample MMD."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .kernel import as_points, pairwise_sq_dists, kernel_matrix


@dataclass
class EvalReport:
    w2_squared: float
    unsafe_rate: float
    mmd_to_target: float
    n_points: int
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)


def cost_matrix(a, b) -> np.ndarray:
    a = as_points(a, name="a")
    b = as_points(b, a.shape[1], "b")
    return pairwise_sq_dists(a, b)


def w2_squared(a, b) -> float:
    """(1/n) min over assignments of sum ||a_i - b_pi(i)||^2 for equal-size sets.

    Uniform weights make exact optimal transport an assignment problem,
    solved here by shortest augmenting paths.
    """
    a = as_points(a, name="a")
    b = as_points(b, a.shape[1], "b")
    if len(a) != len(b):
        raise ValueError(f"point sets must have equal size, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise ValueError("point sets are empty")
    cost = pairwise_sq_dists(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


def unsafe_rate(samples, center, radius: float) -> float:
    """Fraction of samples within ``radius`` of ``center`` (boundary counts)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    x = as_points(samples)
    d = np.linalg.norm(x - np.asarray(center, dtype=float), axis=1)
    return float(np.mean(d <= radius))


def mmd_to_target(samples, target, gamma: float) -> float:
    """Biased two-sample squared MMD with an RBF kernel."""
    x = as_points(samples)
    y = as_points(target, x.shape[1])
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both point sets must be non-empty")
    val = kernel_matrix(x, x, gamma).mean() + kernel_matrix(y, y, gamma).mean() \
        - 2.0 * kernel_matrix(x, y, gamma).mean()
    return float(max(val, 0.0))

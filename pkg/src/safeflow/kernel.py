"""RBF kernel, the single-point MMD energy and its gradient.

Kernels are parameterized by the precision ``gamma``:
``k(x, y) = exp(-gamma * ||x - y||^2)``, equivalently bandwidth
``sigma = 1 / sqrt(2 * gamma)``.

Point sets are plain ``(n, d)`` float arrays. Functions that take a query
accept either a single ``(d,)`` vector or a ``(n, d)`` batch and return the
matching shape.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

# below this kernel mass the repulsive field is treated as exactly zero
Z_FLOOR = 1e-300
DEFAULT_TILE = 256


@dataclass(frozen=True)
class KernelConfig:
    """RBF parameters. ``gamma <= 0`` means "estimate from data on each call"."""

    gamma: float = -1.0
    top_k: int = 3
    eps: float = 0.05

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ValueError(f"gamma must be finite, got {self.gamma}")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer, got {self.top_k}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")

    @property
    def adaptive(self) -> bool:
        return self.gamma <= 0

    @property
    def sigma(self) -> float:
        if self.adaptive:
            raise ValueError("bandwidth is data dependent; call resolve() first")
        return gamma_to_sigma(self.gamma)

    @classmethod
    def from_sigma(cls, sigma: float, **kw) -> "KernelConfig":
        return cls(gamma=sigma_to_gamma(sigma), **kw)

    def resolve(self, queries, negatives) -> float:
        """Concrete precision for this query batch."""
        if not self.adaptive:
            return float(self.gamma)
        return estimate_bandwidth(queries, negatives, top_k=self.top_k, eps=self.eps)


def sigma_to_gamma(sigma: float) -> float:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 1.0 / (2.0 * sigma * sigma)


def gamma_to_sigma(gamma: float) -> float:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return 1.0 / np.sqrt(2.0 * gamma)


def as_points(a, dim: int | None = None, name: str = "points") -> np.ndarray:
    """Validate and return a ``(n, d)`` float array."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a (n, d) array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[1]}, expected {dim}")
    return arr


def _negatives(negatives, dim: int) -> np.ndarray:
    y = as_points(negatives, dim, "negatives")
    if len(y) == 0:
        raise ValueError("negative set is empty")
    return y


def _queries(x):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2):
        raise ValueError(f"query must be (d,) or (n, d), got shape {x.shape}")
    return x.reshape(-1, x.shape[-1]), x.ndim == 1


def _check_gamma(gamma: float):
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")


def pairwise_sq_dists(x, y) -> np.ndarray:
    """``D[i, j] = ||x_i - y_j||^2``, from coordinate differences (no cancellation)."""
    return cdist(x, y, "sqeuclidean")


def _weighted_offsets(q, y, k):
    """sum_j k_ij (q_i - y_j) for each row i.

    Coordinates are re-centred on the tile mean first so the two matrix
    products stay of the same size as the differences they represent.
    """
    c = q.mean(axis=0)
    return (q - c) * k.sum(axis=1, keepdims=True) - k @ (y - c)


def rbf(x, y, gamma: float):
    """Kernel value(s); broadcasts over leading axes."""
    _check_gamma(gamma)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    d = x - y
    return np.exp(-gamma * np.sum(d * d, axis=-1))


def kernel_matrix(x, y, gamma: float) -> np.ndarray:
    _check_gamma(gamma)
    x = as_points(x)
    y = as_points(y, x.shape[1])
    return np.exp(-gamma * pairwise_sq_dists(x, y))


def self_term(negatives, gamma: float) -> float:
    """(1/N^2) sum_ij k(y_i, y_j); constant in the query."""
    y = as_points(negatives)
    total = 0.0
    for i in range(0, len(y), DEFAULT_TILE):
        total += kernel_matrix(y[i:i + DEFAULT_TILE], y, gamma).sum()
    return total / len(y) ** 2


def mmd2(x, negatives, gamma: float, tile: int = DEFAULT_TILE):
    """Biased squared MMD between the Dirac at ``x`` and the negative set."""
    _check_gamma(gamma)
    q, single = _queries(x)
    y = _negatives(negatives, q.shape[1])
    cross = np.concatenate(
        [kernel_matrix(q[i:i + tile], y, gamma).mean(axis=1) for i in range(0, len(q), tile)]
    )
    out = 1.0 + self_term(y, gamma) - 2.0 * cross
    return out[0] if single else out


def kernel_mass(x, negatives, gamma: float) -> np.ndarray | float:
    """Z(x) = (1/N) sum_i k(x, y_i)."""
    _check_gamma(gamma)
    q, single = _queries(x)
    y = _negatives(negatives, q.shape[1])
    z = np.concatenate([kernel_matrix(q[i:i + DEFAULT_TILE], y, gamma).mean(axis=1)
                        for i in range(0, len(q), DEFAULT_TILE)])
    return z[0] if single else z


def mmd_weights(x, negatives, gamma: float):
    """Normalized weights w_i(x) = k(x, y_i) / (N Z(x)) and the mass Z(x).

    Rows whose mass is below ``Z_FLOOR`` get all-zero weights.
    """
    _check_gamma(gamma)
    q, single = _queries(x)
    y = _negatives(negatives, q.shape[1])
    k = kernel_matrix(q, y, gamma)
    z = k.mean(axis=1)
    ok = z >= Z_FLOOR
    w = np.zeros_like(k)
    w[ok] = k[ok] / (len(y) * z[ok, None])
    if single:
        return w[0], z[0]
    return w, z


def grad_mmd2(x, negatives, gamma: float, tile: int = DEFAULT_TILE, return_flags: bool = False):
    """Gradient of :func:`mmd2` in the query, in weighted-repellency form.

    ``(2 / sigma^2) Z(x) [x - sum_i w_i(x) y_i]``, which points away from the
    kernel-weighted mean of the negatives. Queries whose kernel mass falls
    below ``Z_FLOOR`` get an exact zero; with ``return_flags`` a boolean
    out-of-range mask is returned alongside.
    """
    _check_gamma(gamma)
    q, single = _queries(x)
    y = _negatives(negatives, q.shape[1])
    n_neg = len(y)
    two_over_sigma2 = 4.0 * gamma
    out = np.zeros_like(q)
    flags = np.zeros(len(q), dtype=bool)
    for i in range(0, len(q), tile):
        qi = q[i:i + tile]
        k = np.exp(-gamma * pairwise_sq_dists(qi, y))
        z = k.mean(axis=1)
        ok = z >= Z_FLOOR
        flags[i:i + tile] = ~ok
        w = k / (n_neg * np.where(ok, z, 1.0)[:, None])
        # x - sum w_i y_i == sum w_i (x - y_i) because sum w_i = 1
        g = two_over_sigma2 * z[:, None] * _weighted_offsets(qi, y, w)
        g[~ok] = 0.0
        out[i:i + tile] = g
    g = out[0] if single else out
    if return_flags:
        return g, (flags[0] if single else flags)
    return g


def kernel_sum_grad(x, negatives, gamma: float, tile: int = DEFAULT_TILE):
    """Gradient of sum_j k(x, y_j): sum_j -2 gamma k(x, y_j) (x - y_j).

    Attractive direction. ``grad_mmd2 == -(2 / N) * kernel_sum_grad``.
    """
    _check_gamma(gamma)
    q, single = _queries(x)
    y = _negatives(negatives, q.shape[1])
    out = np.empty_like(q)
    for i in range(0, len(q), tile):
        qi = q[i:i + tile]
        k = np.exp(-gamma * pairwise_sq_dists(qi, y))
        out[i:i + tile] = (-2.0 * gamma) * _weighted_offsets(qi, y, k)
    return out[0] if single else out


def estimate_bandwidth(queries, negatives, top_k: int = 3, eps: float = 0.05) -> float:
    """Top-k neighbour heuristic for the kernel precision.

    gamma = -log(eps) / mean r^2, where r^2 runs over each query's sorted
    squared distances to the negatives at ranks 1..k_eff. Rank 0 is always
    skipped, even when queries and negatives are disjoint.
    """
    q = as_points(queries, name="queries")
    y = as_points(negatives, q.shape[1], "negatives")
    if len(q) == 0:
        raise ValueError("query set is empty")
    if len(y) < 2:
        raise ValueError("bandwidth heuristic needs at least 2 negatives")
    k_eff = min(max(int(top_k), 1), len(y) - 1)
    total = 0.0
    for i in range(0, len(q), DEFAULT_TILE):
        d2 = pairwise_sq_dists(q[i:i + DEFAULT_TILE], y)
        # smallest k_eff + 1 entries, then sorted; identical to a full sort's prefix
        head = np.sort(np.partition(d2, k_eff, axis=1)[:, :k_eff + 1], axis=1)
        total += head[:, 1:k_eff + 1].sum()
    r2 = max(total / (len(q) * k_eff), 1e-12)
    return float(-np.log(eps) / r2)

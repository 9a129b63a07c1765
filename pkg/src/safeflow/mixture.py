"""Isotropic Gaussian mixtures and their exact flow-matching velocity.

The probability path is x_t = (1 - t) x0 + t eps with eps ~ N(0, I), so t = 1
is pure noise and t = 0 is data. For a mixture component N(mu_k, s_k^2 I) the
marginal at time t is N((1 - t) mu_k, v_k I), v_k = (1 - t)^2 s_k^2 + t^2,
and both posterior means E[x0 | x_t] and E[eps | x_t] are affine in x_t.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.broadcast_to(np.asarray(self.stds, dtype=float), (len(mu),)).copy()
        if w.shape != (len(mu),):
            raise ValueError("one weight per component required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be a probability vector, sum={w.sum()!r}")
        if np.any(s <= 0):
            raise ValueError("component stds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def ring(cls, num_clusters: int = 8, radius: float = 4.0, std: float = 0.4,
             exclude: tuple = ()) -> "MixtureModel":
        """Equal-weight ring of clusters, optionally dropping some components."""
        keep = [k for k in range(num_clusters) if k not in set(exclude)]
        if not keep:
            raise ValueError("every cluster excluded")
        ang = 2 * np.pi * np.array(keep) / num_clusters
        means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return cls(np.full(len(keep), 1.0 / len(keep)), means, np.full(len(keep), std))

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        comp = gen.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.stds[comp, None] * gen.standard_normal((n, self.dim))

    def _posterior_parts(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = 1.0 - t
        var = a * a * self.stds ** 2 + t * t                       # (K,)
        resid = x[:, None, :] - a * self.means[None, :, :]          # (n, K, d)
        sq = np.einsum("nkd,nkd->nk", resid, resid)
        logp = np.log(self.weights)[None, :] - 0.5 * sq / var - 0.5 * self.dim * np.log(var)
        rho = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return x, a, var, resid, rho

    def responsibilities(self, x, t: float) -> np.ndarray:
        _check_t(t)
        return self._posterior_parts(x, t)[-1]

    def posterior_x0(self, x, t: float):
        """E[x0 | x_t = x]."""
        _check_t(t)
        single = np.ndim(x) == 1
        x0, _ = self._posteriors(x, t)
        return x0[0] if single else x0

    def posterior_eps(self, x, t: float):
        """E[eps | x_t = x]."""
        _check_t(t)
        single = np.ndim(x) == 1
        _, eps = self._posteriors(x, t)
        return eps[0] if single else eps

    def _posteriors(self, x, t):
        x, a, var, resid, rho = self._posterior_parts(x, t)
        x0_k = self.means[None] + (a * self.stds ** 2 / var)[None, :, None] * resid
        eps_k = (t / var)[None, :, None] * resid
        return np.einsum("nk,nkd->nd", rho, x0_k), np.einsum("nk,nkd->nd", rho, eps_k)

    def velocity(self, x, t: float):
        """Exact marginal velocity E[eps - x0 | x_t = x].

        Uses (x - E[x0|x]) / t away from t = 0 and (E[eps|x] - x) / (1 - t)
        away from t = 1; the two agree algebraically.
        """
        _check_t(t)
        single = np.ndim(x) == 1
        x0, eps = self._posteriors(x, t)
        xa = np.atleast_2d(np.asarray(x, dtype=float))
        v = (xa - x0) / t if t >= 0.5 else (eps - xa) / (1.0 - t)
        return v[0] if single else v


def _check_t(t):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")

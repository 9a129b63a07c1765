"""Repulsive guidance fields, their time schedules and equivalence checks.

Three fields push a query ``z`` away from a negative set:

* ``mmd``           -- gradient of the single-point squared MMD energy
* ``spell``         -- sparse radial force active inside a shield radius
* ``safe_denoiser`` -- kernel-weighted repellency ``beta_hat * (z - unsafe_mean)``
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import rng
from .kernel import (
    DEFAULT_TILE,
    Z_FLOOR,
    KernelConfig,
    _negatives,
    _queries,
    _weighted_offsets,
    gamma_to_sigma,
    grad_mmd2,
    kernel_mass,
    pairwise_sq_dists,
)
from .special import MatchingProblem, match_bandwidth

FIELDS = ("mmd", "spell", "safe_denoiser")
MODES = ("equal_strength", "equal_budget", "shifted_window")
MMD_SCALES = ("energy", "kernel_sum")


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant guidance strength on a diffusion-time window.

    Time runs from 1 (noise) to 0 (data); the window is ``[t_end, t_start]``.
    Under ``equal_budget`` the strength inside the window is rescaled so that
    its integral equals ``base_lambda * reference_window_length``.
    """

    t_start: float = 1.0
    t_end: float = 0.0
    base_lambda: float = 0.0
    mode: str = "equal_strength"
    reference_window_length: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.t_end <= self.t_start <= 1.0):
            raise ValueError(
                f"window must satisfy 0 <= t_end <= t_start <= 1, got [{self.t_start}, {self.t_end}]"
            )
        if self.base_lambda < 0:
            raise ValueError("base_lambda must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "equal_budget":
            if self.reference_window_length is None or self.reference_window_length <= 0:
                raise ValueError("equal_budget needs a positive reference_window_length")
            if self.t_start == self.t_end:
                raise ValueError("equal_budget with a degenerate window divides by zero")

    @property
    def length(self) -> float:
        return self.t_start - self.t_end

    @property
    def strength(self) -> float:
        """Constant value of lambda(t) inside the window."""
        if self.mode == "equal_budget":
            return self.base_lambda * self.reference_window_length / self.length
        return self.base_lambda

    @property
    def budget(self) -> float:
        return self.strength * self.length

    def active(self, t: float) -> bool:
        return self.t_end <= t <= self.t_start

    def lambda_at(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return self.strength if self.active(t) else 0.0

    def forward_window(self) -> tuple[float, float]:
        """The same window in forward time s = 1 - t, as ``(s_start, s_end)``."""
        return 1.0 - self.t_start, 1.0 - self.t_end


def lambda_at(s: Schedule, t: float) -> float:
    return s.lambda_at(t)


@dataclass(frozen=True)
class GuidanceSpec:
    field: str = "mmd"
    schedule: Schedule = Schedule()
    kernel: KernelConfig = KernelConfig()
    r: float = 1.0
    alpha: float = 1.0
    eta: float = 1.0
    beta_min: float = 0.0
    # "kernel_sum" multiplies the energy gradient by N/2, i.e. uses the raw
    # repulsive kernel-sum gradient as the field
    mmd_scale: str = "energy"

    def __post_init__(self):
        if self.field not in FIELDS:
            raise ValueError(f"unknown guidance field {self.field!r}; expected one of {FIELDS}")
        if self.field == "spell" and not self.r > 0:
            raise ValueError("spell guidance needs r > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.field == "safe_denoiser" and not self.eta > 0:
            raise ValueError("safe_denoiser guidance needs eta > 0")
        if self.mmd_scale not in MMD_SCALES:
            raise ValueError(f"unknown mmd_scale {self.mmd_scale!r}")


def spell_force(z, negatives, r: float, alpha: float, tile: int = DEFAULT_TILE, return_flags: bool = False):
    """Sum over negatives of alpha (r - |z - y|)_+ (z - y) / |z - y|.

    A query sitting exactly on a negative gets no contribution from it (the
    direction is undefined) and is flagged.
    """
    if not r > 0:
        raise ValueError(f"shield radius must be positive, got {r}")
    q, single = _queries(z)
    y = _negatives(negatives, q.shape[1])
    out = np.zeros_like(q)
    flags = np.zeros(len(q), dtype=bool)
    for i in range(0, len(q), tile):
        qi = q[i:i + tile]
        dist = cdist(qi, y)
        coincident = dist == 0.0
        flags[i:i + tile] = coincident.any(axis=1)
        push = alpha * np.maximum(r - dist, 0.0)
        coef = np.divide(push, dist, out=np.zeros_like(dist), where=~coincident)
        active = np.flatnonzero(coef.any(axis=0))
        # only negatives inside some shield contribute; the rest are exact zeros
        if len(active):
            out[i:i + tile] = _weighted_offsets(qi, y[active], coef[:, active])
    f = out[0] if single else out
    if return_flags:
        return f, (flags[0] if single else flags)
    return f


def unsafe_mean(z, negatives, gamma: float, return_flags: bool = False):
    """Kernel-smoothed mean of the negatives seen from ``z``.

    Falls back to the nearest negative (flagged) when every kernel value
    underflows.
    """
    q, single = _queries(z)
    y = _negatives(negatives, q.shape[1])
    out = np.empty_like(q)
    flags = np.zeros(len(q), dtype=bool)
    for i in range(0, len(q), DEFAULT_TILE):
        d2 = pairwise_sq_dists(q[i:i + DEFAULT_TILE], y)
        k = np.exp(-gamma * d2)
        bad = k.mean(axis=1) < Z_FLOOR
        total = k.sum(axis=1, keepdims=True)
        out[i:i + DEFAULT_TILE] = (k / np.where(bad[:, None], 1.0, total)) @ y
        if bad.any():
            out[i:i + DEFAULT_TILE][bad] = y[np.argmin(d2[bad], axis=1)]
        flags[i:i + DEFAULT_TILE] = bad
    m = out[0] if single else out
    if return_flags:
        return m, (flags[0] if single else flags)
    return m


def beta_hat(z, negatives, gamma: float, eta: float):
    """Adaptive Safe-Denoiser weight (eta / N) sum_i k(z, y_i)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    return eta * kernel_mass(z, negatives, gamma)


def safe_denoiser_direction(z, negatives, gamma: float, return_flags: bool = False):
    m, flags = unsafe_mean(z, negatives, gamma, return_flags=True)
    d = np.asarray(z, dtype=float) - m
    return (d, flags) if return_flags else d


def field_value(spec: GuidanceSpec, z, negatives, gamma: float | None = None):
    """Unscheduled field at ``z``. ``gamma`` overrides ``spec.kernel``."""
    if spec.field == "spell":
        return spell_force(z, negatives, spec.r, spec.alpha)
    if gamma is None:
        gamma = spec.kernel.resolve(z, negatives)
    if spec.field == "mmd":
        g = grad_mmd2(z, negatives, gamma)
        if spec.mmd_scale == "kernel_sum":
            g = g * (len(np.atleast_2d(negatives)) / 2.0)
        return g
    b = beta_hat(z, negatives, gamma, spec.eta)
    d = safe_denoiser_direction(z, negatives, gamma)
    b = np.where(b < spec.beta_min, 0.0, b)
    return np.asarray(b)[..., None] * d


def evaluate_guidance(spec: GuidanceSpec, z, t: float, negatives, gamma: float | None = None):
    """lambda(t) * field(z); an exact zero outside the schedule window."""
    lam = spec.schedule.lambda_at(t)
    z = np.asarray(z, dtype=float)
    if lam == 0.0:
        return np.zeros_like(z)
    return lam * field_value(spec, z, negatives, gamma)


@dataclass
class VerifyReport:
    name: str
    tolerance: float
    max_error: float = 0.0
    worst_trial: int | None = None
    trials: int = 0
    failures: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, trial: int, error: float, seed: int | None = None):
        self.trials += 1
        if error > self.max_error or self.worst_trial is None:
            self.max_error = max(self.max_error, error)
            self.worst_trial = trial
        if not error < self.tolerance:
            self.failures.append({"trial": trial, "seed": seed, "error": error})

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def random_instance(gen: np.random.Generator, dim: int):
    """Query, negatives and precision with the query inside the kernel's reach."""
    n = int(gen.integers(1, 21))
    negatives = gen.normal(scale=1.5, size=(n, dim))
    z = gen.normal(scale=1.5, size=dim)
    gamma = float(np.exp(gen.uniform(np.log(0.02), np.log(1.0))))
    return z, negatives, gamma


def prop1_error(z, negatives, gamma: float, kde_gamma: float | None = None) -> float:
    """|g_SD - (sigma^2 / 2Z) grad E| / (1 + |z|) for one instance."""
    kde_gamma = gamma if kde_gamma is None else kde_gamma
    g_sd = safe_denoiser_direction(z, negatives, kde_gamma)
    sigma2 = gamma_to_sigma(gamma) ** 2
    mass = kernel_mass(z, negatives, gamma)
    rhs = sigma2 / (2.0 * mass) * grad_mmd2(z, negatives, gamma)
    return float(np.linalg.norm(g_sd - rhs) / (1.0 + np.linalg.norm(z)))


def verify_prop1(trials: int = 100, dim: int = 2, seed: int = 0, tol: float = 1e-10,
                 kde_gamma_factor: float = 1.0) -> VerifyReport:
    """Safe-Denoiser direction vs rescaled MMD gradient on random instances.

    ``kde_gamma_factor != 1`` mismatches the two bandwidths; the identity then
    fails, which is the negative control.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = VerifyReport("prop1", tol, extra={"dim": dim, "kde_gamma_factor": kde_gamma_factor})
    for trial in range(trials):
        gen = rng.generator(seed, trial, rng.TRIAL)
        z, negatives, gamma = random_instance(gen, dim)
        err = prop1_error(z, negatives, gamma, gamma * kde_gamma_factor)
        report.record(trial, err, seed)
    return report


def verify_spell_as_mmd(p: MatchingProblem, probe_count: int = 16, dim: int = 2, seed: int = 0,
                        mag_tol: float = 1e-9, cos_tol: float = 1e-12) -> VerifyReport:
    """Probe the shield force and the matched single-point MMD force.

    At |d| = d0 both fields must be parallel and equal in magnitude; at
    |d| = r + 1 the shield force vanishes while the MMD force does not
    (recorded in ``extra``).
    """
    sigma = match_bandwidth(p)
    gamma = 1.0 / (2.0 * sigma ** 2)
    report = VerifyReport("spell_as_mmd", mag_tol, extra={"sigma": sigma, "gamma": gamma})
    outside = []
    worst_cos = 1.0
    for i in range(probe_count):
        gen = rng.generator(seed, i, rng.TRIAL)
        y = gen.normal(size=(1, dim))
        u = gen.normal(size=dim)
        u /= np.linalg.norm(u)
        z = y[0] + p.d0 * u
        f_spell = spell_force(z, y, p.r, p.alpha)
        f_mmd = p.lambda_g * grad_mmd2(z, y, gamma)
        m_s, m_g = np.linalg.norm(f_spell), np.linalg.norm(f_mmd)
        cos = float(f_spell @ f_mmd / (m_s * m_g))
        worst_cos = min(worst_cos, cos)
        err = abs(m_s - m_g) / m_s
        if cos <= 1.0 - cos_tol:
            err = max(err, np.inf)
        report.record(i, err, seed)
        far = y[0] + (p.r + 1.0) * u
        outside.append((float(np.linalg.norm(spell_force(far, y, p.r, p.alpha))),
                        float(np.linalg.norm(p.lambda_g * grad_mmd2(far, y, gamma)))))
    report.extra["min_cosine"] = worst_cos
    report.extra["outside_spell_max"] = max(o[0] for o in outside)
    report.extra["outside_mmd_min"] = min(o[1] for o in outside)
    return report

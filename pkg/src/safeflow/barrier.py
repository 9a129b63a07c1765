"""Reach-avoid certificates for guided flows in forward time s = 1 - t.

A barrier h splits space into a safe set {h >= 0} and an unsafe set
{h < 0}. Along dx/ds = f(s, x) + beta(s) grad E(x), the barrier value obeys
a scalar linear comparison system, so the state of h at a deadline s_c can be
bounded through an integrating factor and the weighted guidance mass

    I_L(s_c) = int_0^{s_c} exp(int_u^{s_c} L) beta(u) du.
"""

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import rng

QUAD_TOL = 1e-9


class PiecewiseConstant:
    """Step function on [0, inf): ``values[i]`` on ``[breaks[i], breaks[i+1])``.

    ``breaks`` starts at 0; the last value extends to infinity.
    """

    def __init__(self, breaks, values):
        self.breaks = np.asarray(breaks, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.breaks.shape != self.values.shape or self.breaks[0] != 0.0:
            raise ValueError("need matching breaks/values with breaks[0] == 0")
        if np.any(np.diff(self.breaks) <= 0):
            raise ValueError("breaks must be strictly increasing")

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls([0.0], [value])

    @classmethod
    def window(cls, start: float, end: float, value: float) -> "PiecewiseConstant":
        """``value`` on [start, end), zero elsewhere."""
        if not 0.0 <= start < end:
            raise ValueError("need 0 <= start < end")
        if start == 0.0:
            return cls([0.0, end], [value, 0.0])
        return cls([0.0, start, end], [0.0, value, 0.0])

    def __call__(self, s):
        idx = np.searchsorted(self.breaks, s, side="right") - 1
        return self.values[np.clip(idx, 0, len(self.values) - 1)]


def _simpson(f, a, fa, m, fm, b, fb):
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def adaptive_simpson(f: Callable, a: float, b: float, tol: float = QUAD_TOL, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""
    if b == a:
        return 0.0

    def ev(s):
        v = f(s)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite integrand at s = {s}")
        return v

    fa, fb = ev(a), ev(b)
    m = 0.5 * (a + b)
    fm = ev(m)
    whole = _simpson(f, a, fa, m, fm, b, fb)
    stack = [(a, fa, m, fm, b, fb, whole, tol, 0)]
    total = 0.0
    while stack:
        a, fa, m, fm, b, fb, whole, eps, depth = stack.pop()
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = ev(lm), ev(rm)
        left = _simpson(f, a, fa, lm, flm, m, fm)
        right = _simpson(f, m, fm, rm, frm, b, fb)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((a, fa, lm, flm, m, fm, left, eps / 2.0, depth + 1))
            stack.append((m, fm, rm, frm, b, fb, right, eps / 2.0, depth + 1))
    if not math.isfinite(total):
        raise FloatingPointError("non-finite integrand")
    return total


def _breaks(*fns, upto: float):
    pts = {0.0, upto}
    for fn in fns:
        for b in getattr(fn, "breaks", ()):
            if 0.0 < b < upto:
                pts.add(float(b))
    return sorted(pts)


def integrate(f: Callable, a: float, b: float, tol: float = QUAD_TOL) -> float:
    """int_a^b f, exact for step functions, adaptive Simpson otherwise."""
    if isinstance(f, PiecewiseConstant):
        edges = [a, *[x for x in f.breaks if a < x < b], b]
        return float(sum(f(0.5 * (lo + hi)) * (hi - lo) for lo, hi in zip(edges[:-1], edges[1:])))
    return adaptive_simpson(lambda s: float(f(s)), a, b, tol)


def integrating_factor_solve(a: Callable, b: Callable, y0: float, s_c: float, tol: float = QUAD_TOL) -> float:
    """y(s_c) for y' = a y + b, y(0) = y0, via the integrating factor.

    exp(int_0^{s_c} a) y0 + int_0^{s_c} exp(int_u^{s_c} a) b(u) du.
    """
    if not 0.0 < s_c:
        raise ValueError("s_c must be positive")
    if not math.isfinite(y0):
        raise ValueError("y0 must be finite")
    edges = _breaks(a, b, upto=s_c)
    # A(u) = int_0^u a at every breakpoint, then piecewise
    cum = [0.0]
    for lo, hi in zip(edges[:-1], edges[1:]):
        cum.append(cum[-1] + integrate(a, lo, hi, tol / len(edges)))
    total_a = cum[-1]
    forced = 0.0
    for j, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        if isinstance(a, PiecewiseConstant) and isinstance(b, PiecewiseConstant):
            # constant slope and forcing on the piece: closed form
            mid = 0.5 * (lo + hi)
            ak, bk, width = float(a(mid)), float(b(mid)), hi - lo
            grow = math.exp(total_a - cum[j + 1])
            piece = bk * width if ak == 0 else bk * math.expm1(ak * width) / ak
            forced += grow * piece
        else:
            a_lo = cum[j]

            def integrand(u, lo=lo, a_lo=a_lo):
                inner = a_lo + integrate(a, lo, u, tol * 0.1)
                return math.exp(total_a - inner) * float(b(u))

            forced += adaptive_simpson(integrand, lo, hi, tol / len(edges))
    out = math.exp(total_a) * y0 + forced
    if not math.isfinite(out):
        raise FloatingPointError("non-finite integrating-factor solution")
    return out


def rk4_solve(rhs: Callable, y0: float, s_c: float, steps: int = 10_000) -> float:
    """Classic 4th-order Runge-Kutta for a scalar y' = rhs(s, y) on [0, s_c]."""
    h = s_c / steps
    y, s = float(y0), 0.0
    for i in range(steps):
        s = i * h
        k1 = rhs(s, y)
        k2 = rhs(s + h / 2, y + h / 2 * k1)
        k3 = rhs(s + h / 2, y + h / 2 * k2)
        k4 = rhs(s + h, y + h * k3)
        y += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


@dataclass
class CertificateInput:
    h0: float
    L: Callable
    beta: Callable
    mu: float
    delta: float
    s_c: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.mu > 1:
            warnings.warn(f"alignment constant mu = {self.mu} exceeds 1", stacklevel=2)
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0.0 < self.s_c <= 1.0:
            raise ValueError("s_c must lie in (0, 1]")


def weighted_mass(ci: CertificateInput) -> float:
    """I_L(s_c) = int_0^{s_c} exp(int_u^{s_c} L) beta(u) du."""
    return integrating_factor_solve(ci.L, ci.beta, 0.0, ci.s_c)


@dataclass
class CertificateResult:
    holds: bool
    lhs: float
    delta: float
    I_bar: float
    int_L: float

    def as_dict(self) -> dict:
        return asdict(self)


def sufficient_certificate(ci: CertificateInput) -> CertificateResult:
    """exp(int_0^{s_c} L) h0 + mu I_L(s_c) >= delta."""
    I_bar = weighted_mass(ci)
    int_L = integrate(ci.L, 0.0, ci.s_c)
    lhs = math.exp(int_L) * ci.h0 + ci.mu * I_bar
    return CertificateResult(lhs >= ci.delta, lhs, ci.delta, I_bar, int_L)


def necessary_bound(ci: CertificateInput, L_plus: Callable) -> tuple[float, bool]:
    """Upper bound on h(x_{s_c}) with growth rate L_plus; unreachable if below delta."""
    upper = integrating_factor_solve(L_plus, lambda s: ci.mu * float(ci.beta(s)), ci.h0, ci.s_c) \
        if not isinstance(ci.beta, PiecewiseConstant) else \
        integrating_factor_solve(L_plus, PiecewiseConstant(ci.beta.breaks, ci.mu * ci.beta.values),
                                 ci.h0, ci.s_c)
    return upper, upper >= ci.delta


def surrogate_terminal(ci: CertificateInput, steps: int = 10_000) -> float:
    """y(s_c) for the worst-case scalar system y' = -L(s) |y| + mu beta(s), y(0) = h0."""
    return rk4_solve(lambda s, y: -float(ci.L(s)) * abs(y) + ci.mu * float(ci.beta(s)),
                     ci.h0, ci.s_c, steps)


def earlier_is_better(L: Callable, s_c: float, u_early: float, u_late: float,
                      mass: float, width: float) -> tuple[float, float]:
    """Weighted mass of the same impulse placed at ``u_early`` vs ``u_late``."""
    out = []
    for u in (u_early, u_late):
        beta = PiecewiseConstant.window(u, u + width, mass / width)
        out.append(weighted_mass(CertificateInput(0.0, L, beta, 1.0, 1.0, s_c)))
    return out[0], out[1]


@dataclass
class ComparisonReport:
    trials: int = 0
    violations: list = field(default_factory=list)
    max_gap_lower: float = -math.inf
    max_gap_upper: float = -math.inf

    @property
    def passed(self) -> bool:
        return not self.violations


def random_coefficients(gen: np.random.Generator):
    """Smooth non-negative slope a(s) and signed forcing b(s)."""
    a0, a1, a2 = gen.uniform(0.0, 1.5, 3)
    w = gen.uniform(0.5, 6.0)
    b0, b1 = gen.uniform(-1.0, 1.0, 2)
    phase = gen.uniform(0, 2 * np.pi)

    def a(s):
        return a0 + a1 * s + a2 * math.sin(w * s) ** 2

    def b(s):
        return b0 + b1 * math.cos(w * s + phase)

    return a, b


def comparison_check(a_minus=None, b=None, trials: int = 100, seed: int = 0,
                     s_c: float = 1.0, tol: float = 1e-8, steps: int = 2000) -> ComparisonReport:
    """Randomized check of both comparison bounds.

    Each trial integrates y' = a y + b + slack (lower bound) and
    y' = a y + b - slack (upper bound) with a random non-negative slack and
    tests them against the integrating-factor solution with the same a, b.
    Passing ``a_minus``/``b`` fixes the coefficients for every trial.
    """
    report = ComparisonReport()
    for trial in range(trials):
        gen = rng.generator(seed, trial, rng.TRIAL)
        a_r, b_r = random_coefficients(gen)
        a = a_minus or a_r
        bb = b or b_r
        c0, c1, w = gen.uniform(0.0, 0.5), gen.uniform(0.0, 0.5), gen.uniform(0.5, 8.0)
        y0 = gen.uniform(-1.0, 1.0)

        def slack(s):
            return c0 + c1 * math.sin(w * s) ** 2

        bound = integrating_factor_solve(a, bb, y0, s_c)
        lower = rk4_solve(lambda s, y: a(s) * y + bb(s) + slack(s), y0, s_c, steps)
        upper = rk4_solve(lambda s, y: a(s) * y + bb(s) - slack(s), y0, s_c, steps)
        report.trials += 1
        report.max_gap_lower = max(report.max_gap_lower, bound - lower)
        report.max_gap_upper = max(report.max_gap_upper, upper - bound)
        if lower < bound - tol or upper > bound + tol:
            report.violations.append({"trial": trial, "seed": seed, "y0": y0,
                                      "lower": lower, "upper": upper, "bound": bound})
    return report


@dataclass
class BarrierSpec:
    """Ball-complement barrier h(x) = |x - c| - rho."""

    center: np.ndarray
    radius: float
    delta: float = 0.1
    boundary_layer: float = 0.1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if not (self.radius > 0 and self.delta > 0 and self.boundary_layer > 0):
            raise ValueError("radius, delta and boundary_layer must be positive")

    def h(self, x):
        return np.linalg.norm(np.atleast_2d(x) - self.center, axis=1) - self.radius

    def grad_h(self, x):
        d = np.atleast_2d(x) - self.center
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n == 0):
            raise FloatingPointError("barrier gradient undefined at the ball centre")
        return d / n


@dataclass
class BarrierTrace:
    s: np.ndarray
    h: np.ndarray  # (steps + 1, n)
    s_c: float
    min_h: np.ndarray
    h_at_sc: np.ndarray
    empirical_mu: float
    empirical_L: np.ndarray
    assumption_a_held: bool
    assumption_b_held: bool
    min_h_after_sc: np.ndarray

    def summary(self, delta: float) -> dict:
        return {
            "min_h": float(self.min_h.min()),
            "h_at_sc_median": float(np.median(self.h_at_sc)),
            "frac_reach_delta": float(np.mean(self.h_at_sc >= delta)),
            "empirical_mu": self.empirical_mu,
            "empirical_L_max": float(np.nanmax(self.empirical_L)) if np.any(np.isfinite(self.empirical_L)) else float("nan"),
            "min_h_after_sc": float(self.min_h_after_sc.min()),
        }


def simulate_forward_barrier(bs: BarrierSpec, model, guidance, negatives, x0, steps: int = 50,
                             s_c: float = 1.0, mu: float | None = None) -> BarrierTrace:
    """Run the guided sampler in forward time and watch the barrier.

    Forward time s = 1 - t. Inside the boundary layer |h| <= boundary_layer the
    alignment grad h . grad E and the ratio |grad h . f| / |h| are measured
    at each grid point, giving empirical estimates of mu and L(s).
    """
    from .guidance import field_value
    from .sampler import SamplerConfig, sample

    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    cfg = SamplerConfig(steps=steps, integrator="midpoint", guidance=guidance,
                        guidance_space="drift", midpoint_guidance_only=True)
    res = sample(model, cfg, negatives, len(x0), x_init=x0, record=True)
    s_grid = 1.0 - res.times
    hs = np.stack([bs.h(p) for p in res.snapshots])
    idx_c = int(np.argmin(np.abs(s_grid - s_c)))
    mus, Ls = [], np.full(len(s_grid), np.nan)
    for j, (t, pts) in enumerate(zip(res.times, res.snapshots)):
        h = bs.h(pts)
        layer = np.abs(h) <= bs.boundary_layer
        if not layer.any():
            continue
        p = pts[layer]
        gh = bs.grad_h(p)
        if guidance is not None:
            mus.extend(np.einsum("ij,ij->i", gh, np.atleast_2d(field_value(guidance, p, negatives))))
        if t > 0:
            drift = -np.atleast_2d(model.velocity(p, t))
            ratio = np.abs(np.einsum("ij,ij->i", gh, drift)) / np.maximum(np.abs(h[layer]), 1e-12)
            Ls[j] = ratio.max()
    emp_mu = float(np.min(mus)) if mus else float("nan")
    return BarrierTrace(
        s=s_grid, h=hs, s_c=s_c,
        min_h=hs[:idx_c + 1].min(axis=0),
        h_at_sc=hs[idx_c],
        empirical_mu=emp_mu,
        empirical_L=Ls,
        assumption_a_held=bool(mus) and (mu is None or emp_mu >= mu),
        assumption_b_held=bool(np.all(np.isnan(Ls) | np.isfinite(Ls))),
        min_h_after_sc=hs[idx_c:].min(axis=0),
    )


def certificate_report(ci: CertificateInput, trace: BarrierTrace | None = None) -> dict:
    """JSON-ready summary of a certificate and, optionally, a simulated trace."""
    res = sufficient_certificate(ci)
    out = {"lhs": res.lhs, "delta": res.delta, "holds": res.holds, "I_bar": res.I_bar,
           "int_L": res.int_L, "empirical_mu": None, "empirical_L_max": None,
           "min_h": None, "h_at_sc": None}
    if trace is not None:
        s = trace.summary(ci.delta)
        out.update(empirical_mu=s["empirical_mu"], empirical_L_max=s["empirical_L_max"],
                   min_h=s["min_h"], h_at_sc=s["h_at_sc_median"])
    return out

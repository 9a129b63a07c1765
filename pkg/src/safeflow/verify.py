"""Fixed-seed verification suites: each returns a list of SuiteRow."""

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import barrier, rng
from .guidance import random_instance, verify_prop1
from .kernel import grad_mmd2, rbf
from .metrics import cost_matrix, w2_squared
from .network import MLP, flow_matching_loss
from .special import (
    INV_E,
    MatchingProblem,
    gaussian_force_magnitude,
    lambert_w0,
    match_bandwidth,
    matching_residual,
    spell_magnitude,
)

SUITES = ("prop1", "prop2", "cbf", "gradcheck", "ot")


@dataclass
class SuiteRow:
    suite: str
    check: str
    max_error: float
    tolerance: float
    passed: bool
    trials: int
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _row(suite, check, errors, tol, detail=None, strict=True):
    errors = np.asarray(errors, dtype=float)
    worst = float(errors.max()) if errors.size else 0.0
    ok = bool(np.all(errors < tol)) if strict else bool(np.all(errors <= tol))
    return SuiteRow(suite, check, worst, tol, ok, int(errors.size), detail or {})


def suite_prop1(seed: int = 0, trials: int = 100) -> list:
    rows = []
    for dim in (2, 4, 8):
        rep = verify_prop1(trials, dim, seed)
        rows.append(SuiteRow("prop1", f"identity d={dim}", rep.max_error, rep.tolerance,
                             rep.passed, rep.trials, {"failures": rep.failures[:5]}))
    return rows


def random_matching_problem(gen: np.random.Generator) -> MatchingProblem:
    """Feasible instance, drawn by rejection on the 1/e bound."""
    while True:
        r = float(np.exp(gen.uniform(np.log(0.2), np.log(5.0))))
        d0 = float(gen.uniform(0.05, 0.95)) * r
        alpha = float(np.exp(gen.uniform(np.log(0.1), np.log(10.0))))
        lam = float(np.exp(gen.uniform(np.log(0.01), np.log(10.0))))
        p = MatchingProblem(alpha, lam, r, d0)
        if p.feasible:
            return p


def lambert_domain(n: int = 1000) -> np.ndarray:
    """Points covering the branch point, the origin and large arguments."""
    near = -INV_E + np.logspace(-15, -1, n // 4)
    mid = np.linspace(-INV_E, 3.0, n // 4)
    big = np.logspace(0, 300, n // 4)
    tiny = np.concatenate([-np.logspace(-300, -2, n // 8), np.logspace(-300, -2, n - 3 * (n // 4) - n // 8)])
    return np.concatenate([near, mid, big, tiny])


def suite_prop2(seed: int = 0, trials: int = 100) -> list:
    mag, eqn = [], []
    for trial in range(trials):
        p = random_matching_problem(rng.generator(seed, trial, rng.TRIAL))
        sigma = match_bandwidth(p)
        m_s = spell_magnitude(p.alpha, p.r, p.d0)
        m_g = gaussian_force_magnitude(p.lambda_g, sigma, p.d0)
        mag.append(abs(m_s - m_g) / m_s)
        eqn.append(matching_residual(p, sigma))
    res = []
    for z in lambert_domain():
        w = lambert_w0(float(z))
        res.append(abs(w * math.exp(w) - z) / max(1.0, abs(z)))
    return [
        _row("prop2", "force magnitudes at d0", mag, 1e-9),
        _row("prop2", "matching equation", eqn, 1e-9),
        _row("prop2", "lambert residual", res, 1e-12),
    ]


def suite_gradcheck(seed: int = 0, trials: int = 100) -> list:
    errs = []
    for trial in range(trials):
        gen = rng.generator(seed, trial, rng.TRIAL)
        dim = int(gen.integers(1, 9))
        z, neg, gamma = random_instance(gen, dim)
        g = grad_mmd2(z, neg, gamma)
        fd = fd_energy_grad(z, neg, gamma)
        errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-8))
    return [_row("gradcheck", "mmd gradient vs central differences", errs, 1e-5),
            _row("gradcheck", "mlp backprop vs central differences", [mlp_gradcheck(seed)], 1e-4)]


def fd_energy_grad(z, negatives, gamma: float) -> np.ndarray:
    """Central differences of the query-dependent part -2/N sum_j k(z, y_j).

    The constant terms of the energy are left out: near a vanishing gradient
    they would swamp the differences in rounding error.
    """
    def energy(p):
        return -2.0 * np.mean(rbf(p, negatives, gamma))

    h = 1e-4 / math.sqrt(gamma)
    fd = np.empty(len(z))
    for i in range(len(z)):
        e = np.zeros(len(z))
        e[i] = h
        fd[i] = (energy(z + e) - energy(z - e)) / (2 * h)
    return fd


def mlp_gradcheck(seed: int = 0, hidden=(8, 8), n: int = 16, h: float = 1e-6) -> float:
    """Max relative error of backprop against central differences on a debug net."""
    mlp = MLP.init(2, hidden, seed)
    gen = rng.generator(seed, 0, rng.TRIAL)
    x0 = gen.normal(size=(n, 2))
    eps = gen.normal(size=(n, 2))
    t = gen.uniform(0, 1, n)
    _, grads = flow_matching_loss(mlp, x0, eps, t)
    worst = 0.0
    for p, g in zip(mlp.params(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = flow_matching_loss(mlp, x0, eps, t, with_grad=False)
            flat[i] = old - h
            down = flow_matching_loss(mlp, x0, eps, t, with_grad=False)
            flat[i] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd) + abs(gflat[i]), 1e-6))
    return worst


def brute_force_w2(a, b) -> float:
    """Optimal cost by enumerating every permutation."""
    c = cost_matrix(a, b)
    n = len(c)
    rows = np.arange(n)
    best = min(c[rows, list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float(best / n)


def suite_ot(seed: int = 0, trials: int = 50) -> list:
    errs = []
    for trial in range(trials):
        gen = rng.generator(seed, trial, rng.TRIAL)
        n = int(gen.integers(1, 8))
        dim = int(gen.integers(1, 4))
        a, b = gen.normal(size=(n, dim)), gen.normal(size=(n, dim))
        errs.append(abs(w2_squared(a, b) - brute_force_w2(a, b)))
    return [_row("ot", "assignment vs permutation enumeration", errs, 0.0, strict=False)]


def random_step_function(gen, lo: float, hi: float, pieces: int = 5, s_c: float = 1.0):
    breaks = np.concatenate([[0.0], np.sort(gen.uniform(0, s_c, pieces - 1))])
    return barrier.PiecewiseConstant(breaks, gen.uniform(lo, hi, pieces))


def suite_cbf(seed: int = 0) -> list:
    rows = []
    # integrating factor against RK4 at 1e4 steps
    errs = []
    for trial in range(20):
        gen = rng.generator(seed, trial, rng.TRIAL)
        a, b = barrier.random_coefficients(gen)
        y0 = float(gen.uniform(-1, 1))
        quad = barrier.integrating_factor_solve(a, b, y0, 1.0)
        ode = barrier.rk4_solve(lambda s, y: a(s) * y + b(s), y0, 1.0, 10_000)
        errs.append(abs(quad - ode))
    rows.append(_row("cbf", "integrating factor vs rk4", errs, 1e-6))

    comp = barrier.comparison_check(trials=100, seed=seed)
    rows.append(SuiteRow("cbf", "comparison sweep violations", float(len(comp.violations)), 0.0,
                         comp.passed, comp.trials,
                         {"max_gap_lower": comp.max_gap_lower, "max_gap_upper": comp.max_gap_upper,
                          "violations": comp.violations[:5]}))

    rows.append(earlier_is_better_sweep(seed))
    rows.append(soundness_sweep(seed))
    return rows


def earlier_is_better_sweep(seed: int = 0, trials: int = 100) -> SuiteRow:
    """Same impulse mass at u1 < u2 with L >= 0.1: the earlier impulse must weigh more."""
    gaps = []
    for trial in range(trials):
        gen = rng.generator(seed, 1000 + trial, rng.TRIAL)
        L = random_step_function(gen, 0.1, 2.0)
        width = float(gen.uniform(0.01, 0.1))
        u1, u2 = np.sort(gen.uniform(0.0, 1.0 - width, 2))
        mass = float(gen.uniform(0.1, 2.0))
        early, late = barrier.earlier_is_better(L, 1.0, u1, u2, mass, width)
        gaps.append(late - early)
    # error > 0 means the later placement won
    return _row("cbf", "earlier-is-better", gaps, 0.0)


def soundness_instance(gen, margin: float = 1e-6):
    """Certificate input that holds with at least ``margin``, or None."""
    L = random_step_function(gen, 0.0, 2.0)
    shape = random_step_function(gen, 0.0, 1.0)
    mu = float(gen.uniform(0.1, 1.0))
    delta = float(gen.uniform(0.05, 0.5))
    h0 = float(gen.uniform(-0.5, 0.5))
    base = barrier.CertificateInput(h0, L, shape, mu, delta)
    res = barrier.sufficient_certificate(base)
    need = delta + margin - math.exp(res.int_L) * h0
    scale = max(need, 0.0) / (mu * res.I_bar) * float(gen.uniform(1.0, 1.5)) if res.I_bar > 0 else 0.0
    beta = barrier.PiecewiseConstant(shape.breaks, shape.values * scale)
    ci = barrier.CertificateInput(h0, L, beta, mu, delta)
    res = barrier.sufficient_certificate(ci)
    return ci if res.lhs - delta >= margin else None


def soundness_sweep(seed: int = 0, trials: int = 100, margin: float = 1e-6) -> SuiteRow:
    """Certificate holds with margin => worst-case surrogate ends above delta - margin."""
    shortfalls, worst = [], None
    for trial in range(trials):
        ci = soundness_instance(rng.generator(seed, 2000 + trial, rng.TRIAL), margin)
        if ci is None:
            continue
        y = barrier.surrogate_terminal(ci, steps=2000)
        short = (ci.delta - margin) - y
        shortfalls.append(short)
        if worst is None or short > worst[0]:
            worst = (short, {"trial": trial, "h0": ci.h0, "mu": ci.mu, "delta": ci.delta, "y_sc": y})
    row = _row("cbf", "certificate soundness on surrogate", shortfalls, 0.0, strict=False)
    row.detail = {"worst": worst[1] if worst else None,
                  "violations": int(np.sum(np.asarray(shortfalls) > 0))}
    return row


def run_suite(name: str, seed: int = 0) -> list:
    if name == "all":
        return [row for s in SUITES for row in run_suite(s, seed)]
    fn = {"prop1": suite_prop1, "prop2": suite_prop2, "cbf": suite_cbf,
          "gradcheck": suite_gradcheck, "ot": suite_ot}.get(name)
    if fn is None:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES + ('all',)}")
    return fn(seed)


def format_table(rows) -> str:
    lines = [f"{'suite':<10} {'check':<40} {'max_error':>12} {'tol':>9} {'n':>5}  result"]
    for r in rows:
        lines.append(f"{r.suite:<10} {r.check:<40} {r.max_error:>12.3e} {r.tolerance:>9.1e} "
                     f"{r.trials:>5}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

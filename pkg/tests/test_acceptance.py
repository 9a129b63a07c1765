"""End-to-end acceptance checks, one test per criterion.

Each test logs a single PASS/FAIL line (collected again in the terminal
summary) and then asserts the same condition. Tolerances are pinned here.
"""

import numpy as np
import pytest

from safeflow.experiments import (
    ExperimentConfig,
    build_model,
    generate_ring,
    run_fig2,
    run_window_ablation,
)
from safeflow.metrics import w2_squared
from safeflow.sampler import sample
from safeflow.verify import run_suite

pytestmark = pytest.mark.acceptance

UNSAFE_FRACTION = 0.10      # guided unsafe rate must be below this share of unguided
PARITY_FACTOR = 2.0         # trained W2 within this factor of analytic W2


def _suite(acceptance_log, number, name):
    rows = run_suite(name, 0)
    bad = [f"{r.check} max_err={r.max_error:.3g} tol={r.tolerance:.3g}" for r in rows if not r.passed]
    worst = ", ".join(f"{r.check}={r.max_error:.3g}/{r.tolerance:.0e}" for r in rows)
    ok = acceptance_log(number, name, not bad, worst if not bad else "failing: " + "; ".join(bad))
    assert ok, bad


def _fig2_detail(rec):
    m = rec.medians
    return (f"median W2 early={m['early']['w2_squared']:.4f} full={m['full']['w2_squared']:.4f} "
            f"unguided={m['unguided']['w2_squared']:.4f}; unsafe unguided={m['unguided']['unsafe_rate']:.4f} "
            f"full={m['full']['unsafe_rate']:.4f} early={m['early']['unsafe_rate']:.4f}")


def test_criterion_1_fig2_ordering(acceptance_log):
    rec = run_fig2(ExperimentConfig(), write=False)
    m = rec.medians
    order = m["early"]["w2_squared"] < m["full"]["w2_squared"]
    cap = UNSAFE_FRACTION * m["unguided"]["unsafe_rate"]
    reduced = all(m[a]["unsafe_rate"] < cap for a in ("full", "early"))
    detail = f"ordering={'ok' if order else 'violated'}, unsafe cap={cap:.4f}; " + _fig2_detail(rec)
    assert acceptance_log(1, "fig2 ordering and unsafe reduction", order and reduced, detail)


def test_criterion_2_prop1(acceptance_log):
    _suite(acceptance_log, 2, "prop1")


def test_criterion_3_prop2(acceptance_log):
    _suite(acceptance_log, 3, "prop2")


def test_criterion_4_gradcheck(acceptance_log):
    _suite(acceptance_log, 4, "gradcheck")


def test_criterion_5_cbf(acceptance_log):
    _suite(acceptance_log, 5, "cbf")


def test_criterion_6_ot(acceptance_log):
    _suite(acceptance_log, 6, "ot")


def test_criterion_7_window_ablation(acceptance_log):
    rec = run_window_ablation(ExperimentConfig(), mode="equal_budget", write=False)
    names = list(rec.medians)
    first = rec.medians[names[0]]["unsafe_rate"]
    ok = all(first <= rec.medians[n]["unsafe_rate"] for n in names[1:])
    detail = "median unsafe " + ", ".join(f"{n}={rec.medians[n]['unsafe_rate']:.4f}" for n in names)
    assert acceptance_log(7, "earliest window no worse (equal budget)", ok, detail)


def _median_unguided_w2(cfg, model):
    n = int(cfg.eval["n_eval"])
    vals = [w2_squared(sample(model, cfg.sampler_config(s), n=n).points, generate_ring(cfg, s, n))
            for s in cfg.seeds]
    return float(np.median(vals))


def test_criterion_8_trained_parity(acceptance_log, tmp_path):
    analytic_cfg = ExperimentConfig()
    trained_cfg = ExperimentConfig(model={"kind": "trained"})
    model = build_model(trained_cfg, tmp_path)
    w_a = _median_unguided_w2(analytic_cfg, build_model(analytic_cfg))
    w_t = _median_unguided_w2(trained_cfg, model)
    parity = w_t <= PARITY_FACTOR * w_a
    rec = run_fig2(trained_cfg, write=False, model=model)
    order = rec.medians["early"]["w2_squared"] < rec.medians["full"]["w2_squared"]
    detail = (f"unguided W2 trained={w_t:.4f} analytic={w_a:.4f} (ratio {w_t / w_a:.2f}); "
              f"trained ordering={'ok' if order else 'violated'}; " + _fig2_detail(rec))
    assert acceptance_log(8, "trained-model parity", parity and order, detail)

"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) and
then asserts. Simulation budgets follow the desk-scale settings; a full run
takes about twenty minutes on one core.
"""

import math
import subprocess
import sys
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from cvboot import RunConfig, cross_validate, make_evaluator, make_learner, naive_bootstrap
from cvboot.sim import GeneratorSpec, coverage_experiment, generate, sim_seed, true_err_m

pytestmark = pytest.mark.slow

N_SIMS = 200
TRUE_REPS = 2000
N_TEST = 100_000

DESIGNS = {
    "linear": ("linear_lowdim", "ols", "mape"),
    "logistic": ("logistic_lowdim", "logistic", "c_index"),
    "itr": ("itr_lowdim", "itr_linear", "ate_positive"),
}


@lru_cache(maxsize=None)
def err_m(design, m, p=None, lam=0.0, reps=TRUE_REPS, n_test=N_TEST):
    kind, lrn, ev = DESIGNS[design]
    learner = make_learner("lasso", lam=lam) if lam else make_learner(lrn)
    return true_err_m(GeneratorSpec(kind, p=p, seed=10_000 + m), learner, make_evaluator(ev), m,
                      n_train_reps=reps, n_test=n_test)


def mc_band(p0, n):
    return 2 * math.sqrt(p0 * (1 - p0) / n)


def run_table(design, m_grid, cfg=None, n_sims=N_SIMS, seed=0):
    kind, lrn, ev = DESIGNS[design]
    cfg = cfg or RunConfig(m=m_grid[0])
    truth = {m: err_m(design, m) for m in m_grid}
    return coverage_experiment(GeneratorSpec(kind), make_learner(lrn), make_evaluator(ev), m_grid,
                               cfg, n_sims, truth, seed=seed)


def test_toy_example(acceptance):
    cfg = RunConfig(m=80, b_cv_point=400)
    ols, mape = make_learner("ols"), make_evaluator("mape")
    spec = GeneratorSpec("linear_lowdim")
    est = np.array([
        cross_validate(generate(replace(spec, seed=sim_seed(1, s))), ols, mape, replace(cfg, seed=s))
        for s in range(1000)
    ])
    truth = err_m("linear", 80, reps=4000, n_test=400_000)
    ok = abs(est.mean() - 0.859) <= 0.01 and abs(truth - 0.861) <= 0.005
    acceptance("1 toy example", ok,
               f"mean CV estimate {est.mean():.4f} (target 0.859 +/- 0.01), "
               f"Err_80 {truth:.4f} (target 0.861 +/- 0.005)")
    assert ok


def test_linear_table(acceptance):
    table = run_table("linear", [40, 60, 80])
    target_sd = {40: 0.077, 60: 0.074, 80: 0.073}
    target_cov = {40: 0.967, 60: 0.960, 80: 0.933}
    parts, ok = [], True
    for m in (40, 60, 80):
        r = table.row(m)
        good = (abs(r.bias) < 0.01 and abs(r.sd - target_sd[m]) <= 0.015
                and abs(r.coverage_adj - target_cov[m]) <= mc_band(target_cov[m], N_SIMS))
        ok &= good
        parts.append(f"m={m} bias {r.bias:+.4f} sd {r.sd:.3f} (vs {target_sd[m]}) "
                     f"adj cov {r.coverage_adj:.3f} (vs {target_cov[m]})")
    acceptance("2 linear p=10 coverage", ok, "; ".join(parts))
    assert ok


def test_logistic_table(acceptance):
    table = run_table("logistic", [40, 80])
    target_mean = {40: 0.800, 80: 0.849}
    target_cov = {40: 0.947, 80: 0.895}
    parts, ok = [], True
    for m in (40, 80):
        r = table.row(m)
        good = (abs(r.mean - target_mean[m]) <= 0.01
                and abs(r.coverage_adj - target_cov[m]) <= mc_band(target_cov[m], N_SIMS))
        ok &= good
        parts.append(f"m={m} mean {r.mean:.4f} (vs {target_mean[m]}) Err_m {r.err_m:.4f} "
                     f"adj cov {r.coverage_adj:.3f} (vs {target_cov[m]})")
    acceptance("3 logistic p=10 coverage", ok, "; ".join(parts))
    assert ok


def test_itr_table(acceptance):
    table = run_table("itr", [80, 140])
    target_mean = {80: 0.377, 140: 0.449}
    target_cov = {80: 0.951, 140: 0.954}
    parts, ok = [], True
    for m in (80, 140):
        r = table.row(m)
        good = (abs(r.mean - target_mean[m]) <= 0.02
                and abs(r.coverage_unadj - target_cov[m]) <= mc_band(target_cov[m], N_SIMS))
        ok &= good
        parts.append(f"m={m} mean {r.mean:.4f} (vs {target_mean[m]}) Err_m {r.err_m:.4f} "
                     f"unadj cov {r.coverage_unadj:.3f} (vs {target_cov[m]})")
    acceptance("4 ITR p=10 coverage", ok, "; ".join(parts))
    assert ok


def test_high_dimensional_smoke(acceptance):
    spec = GeneratorSpec("linear_lowdim", p=200)
    lasso = make_learner("lasso", lam=0.2)
    truth = {60: err_m("linear", 60, p=200, lam=0.2, reps=500, n_test=50_000)}
    table = coverage_experiment(spec, lasso, make_evaluator("mape"), [60], RunConfig(m=60), 20,
                                truth, seed=5)
    r = table.row(60)
    ok = 0.85 <= r.coverage_adj <= 1.0
    acceptance("5 p=200 lasso smoke", ok,
               f"20 sims, adj cov {r.coverage_adj:.3f} (required in [0.85, 1]), "
               f"mean {r.mean:.4f}, Err_60 {r.err_m:.4f}")
    assert ok


def test_calibration_small_budget(acceptance):
    cfg = RunConfig(m=80, b_boot=20, b_cv=25, calibrate=True)
    r = run_table("linear", [80], cfg, seed=7).row(80)
    gain = r.coverage_cal_adj - r.coverage_adj
    ok = r.coverage_cal_adj >= r.coverage_adj and gain >= 0.03
    acceptance("6 calibration", ok,
               f"adj cov {r.coverage_adj:.3f} -> calibrated {r.coverage_cal_adj:.3f} "
               f"(gain {gain:+.3f}, required >= +0.03; {r.calibration_skipped} skipped)")
    assert ok


def test_naive_bootstrap_bias(acceptance):
    ols, mape = make_learner("ols"), make_evaluator("mape")
    spec = GeneratorSpec("linear_lowdim")
    shifts = []
    for s in range(20):
        data = generate(replace(spec, seed=sim_seed(2, s)))
        cfg = RunConfig(m=80, b_boot=200, b_cv=50, seed=s)
        point = cross_validate(data, ols, mape, cfg)
        naive = naive_bootstrap(data, ols, mape, cfg)
        shifts.append((point - naive.mean) / naive.estimates.std(ddof=1))
    shift = float(np.mean(shifts))
    ok = abs(shift - 0.8) <= 0.3
    acceptance("7 naive bootstrap bias", ok,
               f"naive mean below the CV estimate by {shift:.2f} SD "
               f"(target 0.8 +/- 0.3; {len(shifts)} data sets)")
    assert ok


def test_property_suite(acceptance):
    tests = Path(__file__).parent
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", str(tests), "-m", "property", "-q",
         "--hypothesis-profile=thorough", "-p", "no:cacheprovider"],
        capture_output=True, text=True,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-300:]
    ok = proc.returncode == 0
    acceptance("8 property suite (1000 examples each)", ok, summary)
    assert ok, proc.stdout[-3000:]

"""Simulation designs and the coverage-experiment runner."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import resampling as rs
from .engine import RunConfig, fast_bootstrap
from .errors import FoldError
from .resampling import WeightedView
from .types import Dataset

KINDS = (
    "linear_lowdim",
    "linear_highdim",
    "logistic_lowdim",
    "logistic_highdim",
    "itr_lowdim",
    "itr_highdim",
)

# default (n, p) per design
_DEFAULTS = {
    "linear": (90, 10),
    "logistic": (90, 10),
    "itr": (180, 10),
}
HIGHDIM_P = 1000

# small-budget (b_boot, b_cv) presets; the logistic design needs more splits
# per bootstrap to avoid zero between-bootstrap estimates
SMALL_BUDGETS = {"linear": (20, 25), "logistic": (20, 50), "itr": (20, 25)}


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "linear_lowdim"
    n: Optional[int] = None
    p: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown design {self.kind!r}; expected one of {KINDS}")
        n0, p0 = _DEFAULTS[self.family]
        if self.kind.endswith("highdim"):
            p0 = HIGHDIM_P
        object.__setattr__(self, "n", n0 if self.n is None else int(self.n))
        object.__setattr__(self, "p", p0 if self.p is None else int(self.p))
        if self.n < 2 or self.p < 4:
            raise ValueError("designs need n >= 2 and p >= 4 (four active slopes)")
        if self.family == "itr" and self.n % 2:
            raise ValueError("the treatment design needs an even n (n/2 per arm)")

    @property
    def family(self) -> str:
        return self.kind.split("_")[0]

    def coefficients(self) -> dict[str, np.ndarray]:
        """True coefficient vectors, intercept first."""
        def vec(head):
            out = np.zeros(self.p + 1)
            out[1:5] = head
            return out

        if self.family == "linear":
            return {"beta": vec([1.0, 1.0, 1.0, 1.0])}
        if self.family == "logistic":
            return {"beta": vec([1.16] * 4)}
        return {
            "beta1": vec([0.25, 0.25, 0.25, 0.25]),
            "beta0": vec([0.25, -0.25, 0.25, -0.25]),
        }


def _draw(spec: GeneratorSpec, n: int, rng: np.random.Generator) -> Dataset:
    z = rng.standard_normal((n, spec.p))
    zt = np.column_stack([np.ones(n), z])
    coefs = spec.coefficients()
    if spec.family == "linear":
        y = zt @ coefs["beta"] + rng.standard_normal(n)
        return Dataset(z, y)
    if spec.family == "logistic":
        y = (rng.random(n) < expit(zt @ coefs["beta"])).astype(float)
        return Dataset(z, y, outcome_kind="binary")
    g = rng.permutation(np.repeat([1.0, 0.0], [n // 2, n - n // 2]))
    y1 = zt @ coefs["beta1"] + rng.standard_normal(n)
    y0 = zt @ coefs["beta0"] + rng.standard_normal(n)
    return Dataset(z, np.where(g == 1, y1, y0), treatment=g)


def generate(spec: GeneratorSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    """One data set of size ``spec.n`` from the named design."""
    return _draw(spec, spec.n, np.random.default_rng(spec.seed) if rng is None else rng)


def _fit_and_evaluate(train: Dataset, test: Dataset, learner, evaluator) -> float:
    model = learner.fit(WeightedView.unweighted(train))
    view = WeightedView.unweighted(test)
    if hasattr(evaluator, "cutoff") and evaluator.cutoff == "train_median":
        return evaluator.evaluate(view, model, WeightedView.unweighted(train))
    return evaluator.evaluate(view, model)


def true_err_m(
    spec: GeneratorSpec,
    learner,
    evaluator,
    m: int,
    n_train_reps: int = 2000,
    n_test: int = 50_000,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Monte-Carlo Err_m: mean performance of models trained on fresh size-m samples.

    All models are scored on one shared test sample of size ``n_test``.
    Training samples on which the fit fails are redrawn.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    test = _draw(spec, n_test, rng)
    vals = []
    while len(vals) < n_train_reps:
        try:
            vals.append(_fit_and_evaluate(_draw(spec, m, rng), test, learner, evaluator))
        except FoldError:
            continue
    return float(np.mean(vals))


def folded_normal_mean(mu: float, sd: float) -> float:
    """E|G| for G ~ N(mu, sd^2)."""
    if sd <= 0:
        return abs(mu)
    return sd * math.sqrt(2 / math.pi) * math.exp(-mu * mu / (2 * sd * sd)) + mu * (
        1 - 2 * NormalDist().cdf(-mu / sd)
    )


def err_dn(
    spec: GeneratorSpec,
    data: Dataset,
    learner,
    evaluator,
    n_test: int = 50_000,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Population performance of the model fit on all of ``data``.

    For the linear design with an OLS fit and absolute error this is the
    closed-form mean of |N(intercept, 1 + |slopes - true slopes|^2)|;
    otherwise it is estimated on a fresh test sample.
    """
    model = learner.fit(WeightedView.unweighted(data))
    if spec.family == "linear" and getattr(evaluator, "name", "") == "mape":
        beta = spec.coefficients()["beta"]
        diff = model.coef - beta
        return folded_normal_mean(float(diff[0]), math.sqrt(1 + float(diff[1:] @ diff[1:])))
    rng = np.random.default_rng(spec.seed + 1) if rng is None else rng
    test = WeightedView.unweighted(_draw(spec, n_test, rng))
    return evaluator.evaluate(test, model)


# ---------------------------------------------------------------------------
# coverage experiments


def _rate(hits: np.ndarray) -> tuple[float, float]:
    """Coverage rate and its Monte-Carlo standard error."""
    if hits.size == 0:
        return float("nan"), float("nan")
    p = float(hits.mean())
    return p, math.sqrt(p * (1 - p) / hits.size)


def _covers(ci: Optional[tuple[float, float]], target: float) -> float:
    if ci is None:
        return np.nan
    return float(ci[0] <= target <= ci[1])


@dataclass
class CoverageRow:
    m: int
    err_m: float
    n_sims: int
    mean: float
    bias: float
    sd: float
    coverage_unadj: float
    coverage_unadj_se: float
    coverage_adj: float
    coverage_adj_se: float
    coverage_cal: float = float("nan")
    coverage_cal_se: float = float("nan")
    coverage_cal_adj: float = float("nan")
    coverage_cal_adj_se: float = float("nan")
    coverage_dn_adj: float = float("nan")
    coverage_dn_adj_se: float = float("nan")
    median_width_unadj: float = float("nan")
    median_width_cal: float = float("nan")
    calibration_skipped: int = 0


@dataclass
class CoverageTable:
    design: str
    b_boot: int
    b_cv: int
    rows: list[CoverageRow] = field(default_factory=list)

    def row(self, m: int) -> CoverageRow:
        return next(r for r in self.rows if r.m == m)

    def to_dict(self) -> dict:
        return {"design": self.design, "b_boot": self.b_boot, "b_cv": self.b_cv,
                "rows": [asdict(r) for r in self.rows]}


def sim_seed(seed: int, sim: int) -> int:
    return int(rs.cell_rng(seed, rs.SIM, sim).integers(2**62))


def coverage_experiment(
    spec: GeneratorSpec,
    learner,
    evaluator,
    m_grid: Sequence[int],
    cfg: RunConfig,
    n_sims: int,
    true_values: dict[int, float],
    seed: int = 0,
    with_err_dn: bool = False,
    progress=None,
) -> CoverageTable:
    """Repeat generate -> point estimate + bootstrap CI over ``n_sims`` data sets.

    ``true_values`` maps each m to its Err_m (see ``true_err_m``). Every rate
    comes with its Monte-Carlo standard error.
    """
    missing = [m for m in m_grid if m not in true_values]
    if missing:
        raise ValueError(f"no Err_m supplied for m in {missing}")
    recs: dict[int, list] = {m: [] for m in m_grid}
    for s in range(n_sims):
        ss = sim_seed(seed, s)
        data = generate(replace(spec, seed=ss))
        truth_dn = err_dn(spec, data, learner, evaluator) if with_err_dn else None
        for m in m_grid:
            _, rep = fast_bootstrap(data, learner, evaluator, replace(cfg, m=m, seed=ss))
            recs[m].append((rep, truth_dn))
        if progress is not None:
            progress(s + 1, n_sims)
    table = CoverageTable(spec.kind, cfg.b_boot, cfg.b_cv)
    for m in m_grid:
        truth = true_values[m]
        reps = [r for r, _ in recs[m]]
        pts = np.array([r.point for r in reps])
        unadj = np.array([_covers(r.ci_normal, truth) for r in reps])
        adj = np.array([_covers(r.ci_adj, truth) for r in reps])
        row = CoverageRow(
            m=m, err_m=truth, n_sims=n_sims,
            mean=float(pts.mean()), bias=float(pts.mean() - truth),
            sd=float(pts.std(ddof=1)) if n_sims > 1 else 0.0,
            coverage_unadj=_rate(unadj)[0], coverage_unadj_se=_rate(unadj)[1],
            coverage_adj=_rate(adj)[0], coverage_adj_se=_rate(adj)[1],
            median_width_unadj=float(np.median([r.ci_normal[1] - r.ci_normal[0] for r in reps])),
        )
        if cfg.calibrate:
            cal = np.array([_covers(r.ci_calibrated, truth) for r in reps])
            cal_adj = np.array([_covers(r.ci_calibrated_adj, truth) for r in reps])
            ok = ~np.isnan(cal)
            row.calibration_skipped = int((~ok).sum())
            row.coverage_cal, row.coverage_cal_se = _rate(cal[ok])
            row.coverage_cal_adj, row.coverage_cal_adj_se = _rate(cal_adj[ok])
            widths = [r.ci_calibrated[1] - r.ci_calibrated[0] for r in reps if r.ci_calibrated]
            row.median_width_cal = float(np.median(widths)) if widths else float("nan")
        if with_err_dn:
            dn = np.array([_covers(r.ci_adj, t) for r, t in recs[m]])
            row.coverage_dn_adj, row.coverage_dn_adj_se = _rate(dn)
        table.rows.append(row)
    return table

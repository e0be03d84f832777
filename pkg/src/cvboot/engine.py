"""Cross-validation point estimates and their bootstrap standard errors.

The unit of work is a cell: one (train weights, test weights) pair over all
n rows. A cell's split comes from its own counter-based stream keyed by
(seed, tag, b, k, attempt), so results do not depend on evaluation order or
on how cells are batched or spread over workers. Cells whose fit or metric
is undefined are redrawn with the next ``attempt``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import resampling as rs
from .errors import (
    CalibrationDegenerate,
    DegenerateFold,
    FoldError,
    MissingTreatment,
    NonBinaryOutcome,
    OneClass,
)
from .metrics import DEFAULT_ROC_GRID, Evaluator, RocCurve, SubgroupATE, roc_prevalidated
from .resampling import WeightedView
from .types import Dataset, InferenceReport, ThetaMatrix, VarianceComponents, validate
from .variance import (
    calibrate,
    critical_ci,
    drop_incomplete_rows,
    estimate_components,
    normal_ci,
    optimal_allocation,
)

# target number of cells handed to one batched fit
BATCH_CELLS = 256
NAIVE_LABEL = "biased - validation only"


@dataclass(frozen=True)
class RunConfig:
    m: int
    b_cv_point: int = 400
    b_boot: int = 200
    b_cv: int = 20
    alpha: float = 0.05
    seed: int = 0
    calibrate: bool = False
    l_reps: int = 1000
    kfold_k: Optional[int] = None
    kfold_k_adj: Optional[int] = None
    lambda0: float = rs.DEFAULT_LAMBDA0
    max_redraws: int = 100
    stratify: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"training size m must be >= 1, got {self.m}")
        if self.b_cv_point < 1:
            raise ValueError("b_cv_point must be >= 1")
        if self.b_boot < 2 or self.b_cv < 2:
            raise ValueError("b_boot and b_cv must both be >= 2")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.l_reps < 1:
            raise ValueError("l_reps must be >= 1")
        for name in ("kfold_k", "kfold_k_adj"):
            v = getattr(self, name)
            if v is not None and v < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.max_redraws < 0 or self.threads < 1:
            raise ValueError("max_redraws must be >= 0 and threads >= 1")

    def check_data(self, n: int) -> None:
        if not 1 <= self.m <= n - 1:
            raise ValueError(f"training size m must lie in [1, {n - 1}], got {self.m}")
        for name in ("kfold_k", "kfold_k_adj"):
            v = getattr(self, name)
            if v is not None and v > n:
                raise ValueError(f"{name}={v} exceeds n={n}")


# ---------------------------------------------------------------------------
# cell evaluation


def _check_compat(data: Dataset, learners, evaluator) -> None:
    validate(data)
    if getattr(evaluator, "needs_binary", False) and data.outcome_kind != "binary":
        raise NonBinaryOutcome(f"metric {evaluator.name!r} needs a binary outcome")
    needs_g = getattr(evaluator, "needs_treatment", False) or any(
        getattr(lrn, "needs_treatment", False) for lrn in learners
    )
    if needs_g and data.treatment is None:
        raise MissingTreatment("this learner/metric combination needs a treatment column")


def batch_scores(data: Dataset, learner, w_train: np.ndarray) -> np.ndarray:
    """(K, n) scores of K models, one per training-weight row; NaN rows where a fit failed."""
    if hasattr(learner, "fit_batch"):
        coef = learner.fit_batch(data.features, data.outcome, data.treatment, w_train)
        return coef[:, :1] + coef[:, 1:] @ data.features.T
    out = np.full(w_train.shape, np.nan)
    for k, w in enumerate(w_train):
        idx = np.flatnonzero(w > 0)
        if idx.size == 0:
            continue
        try:
            model = learner.fit(WeightedView(data, idx, w[idx].astype(float)))
        except FoldError:
            continue
        out[k] = learner.predict(model, data.features)
    return out


def _generic_cells(data, learner, evaluator, w_train, w_test):
    out = np.full(w_train.shape[0], np.nan)
    for k in range(w_train.shape[0]):
        tr = np.flatnonzero(w_train[k] > 0)
        te = np.flatnonzero(w_test[k] > 0)
        if tr.size == 0 or te.size == 0:
            continue
        train = WeightedView(data, tr, w_train[k, tr].astype(float))
        test = WeightedView(data, te, w_test[k, te].astype(float))
        try:
            model = learner.fit(train)
            if isinstance(evaluator, SubgroupATE):
                out[k] = evaluator.evaluate(test, model, train)
            else:
                out[k] = evaluator.evaluate(test, model)
        except FoldError:
            continue
    return out


def evaluate_cells(data: Dataset, learner, evaluator, w_train, w_test) -> np.ndarray:
    """Metric value of each cell; NaN where the cell is degenerate."""
    w_train = np.asarray(w_train, dtype=float)
    w_test = np.asarray(w_test, dtype=float)
    if hasattr(learner, "fit_batch") and hasattr(evaluator, "evaluate_batch"):
        scores = batch_scores(data, learner, w_train)
        bad = np.isnan(scores).any(axis=1)
        vals = evaluator.evaluate_batch(
            data.outcome, data.treatment, np.nan_to_num(scores), w_test, w_train
        )
        vals[bad] = np.nan
        vals[w_train.sum(axis=1) <= 0] = np.nan
        return vals
    return _generic_cells(data, learner, evaluator, w_train, w_test)


CellMaker = Callable[[int, int, int], tuple[np.ndarray, np.ndarray]]


def _run_cells(data, learners, evaluator, cells, make_cell: CellMaker, max_redraws: int):
    """Evaluate cells [(b, k), ...] for every learner, redrawing failures.

    A cell counts as failed when any learner's value is NaN, so paired
    learners always see the same split. Returns (values (C, L), redraw fits).
    """
    n_cells = len(cells)
    vals = np.full((n_cells, len(learners)), np.nan)
    todo = np.arange(n_cells)
    attempt = 0
    redraws = 0
    while todo.size and attempt <= max_redraws:
        for lo in range(0, todo.size, BATCH_CELLS):
            chunk = todo[lo:lo + BATCH_CELLS]
            pairs = [make_cell(cells[i][0], cells[i][1], attempt) for i in chunk]
            w_train = np.stack([p[0] for p in pairs])
            w_test = np.stack([p[1] for p in pairs])
            for j, lrn in enumerate(learners):
                vals[chunk, j] = evaluate_cells(data, lrn, evaluator, w_train, w_test)
        if attempt > 0:
            redraws += todo.size * len(learners)
        todo = todo[np.isnan(vals[todo]).any(axis=1)]
        vals[todo] = np.nan
        attempt += 1
    return vals, redraws


def _split_mask(data: Dataset, m: int, rng, stratify: bool) -> np.ndarray:
    if stratify:
        split = rs.draw_split(data.n, rs.SplitConfig(m, True), rng, data.outcome)
        return split.masks()[0]
    return rs.train_mask(data.n, m, rng)


# ---------------------------------------------------------------------------
# point estimate


def _point_values(data, learners, evaluator, cfg: RunConfig):
    def make(b, k, attempt):
        mask = _split_mask(data, cfg.m, rs.cell_rng(cfg.seed, rs.POINT, 0, k, attempt), cfg.stratify)
        return mask.astype(float), (~mask).astype(float)

    cells = [(0, k) for k in range(cfg.b_cv_point)]
    vals, redraws = _run_cells(data, learners, evaluator, cells, make, cfg.max_redraws)
    if np.isnan(vals).any():
        raise DegenerateFold(
            f"{int(np.isnan(vals).any(axis=1).sum())} point-estimate splits were still "
            f"degenerate after {cfg.max_redraws} redraws"
        )
    return vals, redraws


def cross_validate(data: Dataset, learner, evaluator, cfg: RunConfig) -> float:
    """Mean metric over ``b_cv_point`` random splits at training size m (unit weights)."""
    _check_compat(data, [learner], evaluator)
    cfg.check_data(data.n)
    vals, _ = _point_values(data, [learner], evaluator, cfg)
    return float(vals.mean())


# ---------------------------------------------------------------------------
# fast bootstrap


def _boot_rows(data, learners, evaluator, cfg, m_adj, rows):
    """Theta cells for bootstrap rows ``rows``; returns (values (R, B_CV, L), redraws)."""
    weights = {b: rs.draw_boot_weights(data.n, rs.cell_rng(cfg.seed, rs.BOOT, b)).w for b in rows}

    def make(b, k, attempt):
        w = weights[b]
        mask = _split_mask(
            data, m_adj, rs.cell_rng(cfg.seed, rs.SPLIT, b, k, attempt), cfg.stratify
        )
        return w * mask, w * ~mask

    cells = [(b, k) for b in rows for k in range(cfg.b_cv)]
    vals, redraws = _run_cells(data, learners, evaluator, cells, make, cfg.max_redraws)
    return vals.reshape(len(rows), cfg.b_cv, len(learners)), redraws


def _row_chunks(b_boot: int, b_cv: int) -> list[list[int]]:
    # chunking ignores the thread count so batched arithmetic, and hence every
    # theta cell, is bit-identical however many workers run
    per = max(1, BATCH_CELLS // b_cv)
    return [list(range(lo, min(lo + per, b_boot))) for lo in range(0, b_boot, per)]


def paired_theta(
    data: Dataset, learners: Sequence, evaluator, cfg: RunConfig
) -> tuple[list[ThetaMatrix], int]:
    """Bootstrap theta matrices of several learners on shared weights and splits."""
    learners = list(learners)
    _check_compat(data, learners, evaluator)
    cfg.check_data(data.n)
    m_adj = rs.solve_m_adj(data.n, cfg.m, cfg.lambda0)
    chunks = _row_chunks(cfg.b_boot, cfg.b_cv)
    if cfg.threads > 1:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=cfg.threads)(
            delayed(_boot_rows)(data, learners, evaluator, cfg, m_adj, rows) for rows in chunks
        )
    else:
        parts = [_boot_rows(data, learners, evaluator, cfg, m_adj, rows) for rows in chunks]
    theta = np.concatenate([p[0] for p in parts], axis=0)
    redraws = sum(p[1] for p in parts)
    return [ThetaMatrix(theta[:, :, j]) for j in range(len(learners))], redraws


def bootstrap_theta(data: Dataset, learner, evaluator, cfg: RunConfig) -> tuple[ThetaMatrix, int]:
    (theta,), redraws = paired_theta(data, [learner], evaluator, cfg)
    return theta, redraws


def _report(point, theta: ThetaMatrix, cfg: RunConfig, n: int, redraws: int) -> InferenceReport:
    m_adj = rs.solve_m_adj(n, cfg.m, cfg.lambda0)
    adj = rs.adjustment_factor(n, m_adj)
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        vc = estimate_components(theta, adj)
    for w in caught:
        notes.append(str(w.message))
        warnings.warn(w.message, w.category, stacklevel=3)
    se = vc.sigma_bt
    se_adj = se * math.sqrt(adj)
    _, dropped = drop_incomplete_rows(theta)
    report = InferenceReport(
        point=float(point),
        se=se,
        se_adj=se_adj,
        ci_normal=normal_ci(point, se, cfg.alpha),
        ci_adj=normal_ci(point, se_adj, cfg.alpha),
        m=cfg.m,
        m_adj=m_adj,
        alpha=cfg.alpha,
        components=vc,
        b_cv_point=cfg.b_cv_point,
        b_boot=cfg.b_boot,
        b_cv=cfg.b_cv,
        redraw_fits=redraws,
        missing_cells=theta.n_missing,
        dropped_rows=dropped,
        notes=notes,
    )
    if cfg.calibrate:
        try:
            cal = calibrate(theta, cfg.alpha, cfg.l_reps, rs.cell_rng(cfg.seed, rs.CALIB))
        except CalibrationDegenerate as e:
            report.notes.append(f"calibration skipped: {e}")
        else:
            report.c_crit = cal.c_crit
            report.ci_calibrated = critical_ci(point, se, cal.c_crit)
            report.ci_calibrated_adj = critical_ci(point, se_adj, cal.c_crit)
    return report


def fast_bootstrap(
    data: Dataset, learner, evaluator, cfg: RunConfig, point: Optional[float] = None
) -> tuple[ThetaMatrix, InferenceReport]:
    """Bootstrap theta matrix at size m_adj and the report around the size-m point estimate.

    ``point`` may be passed when the point estimate was already computed with
    the same config; its fits are then still counted in ``fits_used``.
    """
    theta, redraws = bootstrap_theta(data, learner, evaluator, cfg)
    if point is None:
        vals, point_redraws = _point_values(data, [learner], evaluator, cfg)
        point = float(vals.mean())
        redraws += point_redraws
    return theta, _report(point, theta, cfg, data.n, redraws)


def compare_models(
    data: Dataset, learner_a, learner_b, evaluator, cfg: RunConfig
) -> InferenceReport:
    """Inference for Err_m(a) - Err_m(b) using identical splits and weights for both."""
    (ta, tb), redraws = paired_theta(data, [learner_a, learner_b], evaluator, cfg)
    vals, point_redraws = _point_values(data, [learner_a, learner_b], evaluator, cfg)
    diff = ThetaMatrix(ta.values - tb.values)
    report = _report(float((vals[:, 0] - vals[:, 1]).mean()), diff, cfg, data.n,
                     redraws + point_redraws)
    report.notes.append("difference learner_a - learner_b; fits are counted per learner pair")
    return report


def pilot_allocate(
    data: Dataset,
    learner,
    evaluator,
    pilot_cfg: RunConfig,
    total_fits: int,
    rule: str = "exact",
) -> RunConfig:
    """Estimate variance components on a small pilot and split ``total_fits`` accordingly."""
    if pilot_cfg.b_boot * pilot_cfg.b_cv > total_fits / 10:
        raise ValueError(
            f"pilot budget {pilot_cfg.b_boot * pilot_cfg.b_cv} exceeds a tenth of total_fits={total_fits}"
        )
    theta, _ = bootstrap_theta(data, learner, evaluator, pilot_cfg)
    vc = estimate_components(theta)
    b_boot, b_cv = optimal_allocation(vc, total_fits, rule)
    return replace(pilot_cfg, b_boot=b_boot, b_cv=b_cv)


# ---------------------------------------------------------------------------
# naive bootstrap (validation oracle)


@dataclass(frozen=True)
class NaiveBootstrapResult:
    estimates: np.ndarray
    variance: float
    label: str = NAIVE_LABEL

    @property
    def mean(self) -> float:
        return float(np.mean(self.estimates))


def naive_bootstrap(data: Dataset, learner, evaluator, cfg: RunConfig) -> NaiveBootstrapResult:
    """Resample rows, then cross-validate the resampled data set at size m.

    Splits are drawn over the n resampled positions, so copies of one row can
    land on both sides of a split. This reproduces the flaw on purpose.
    """
    _check_compat(data, [learner], evaluator)
    cfg.check_data(data.n)
    n = data.n
    draws = {}

    def make(b, k, attempt):
        if b not in draws:
            draws[b] = rs.cell_rng(cfg.seed, rs.NAIVE, b).integers(0, n, size=n)
        rows = draws[b]
        mask = rs.train_mask(n, cfg.m, rs.cell_rng(cfg.seed, rs.NAIVE, b, k + 1, attempt))
        return (np.bincount(rows[mask], minlength=n).astype(float),
                np.bincount(rows[~mask], minlength=n).astype(float))

    cells = [(b, k) for b in range(cfg.b_boot) for k in range(cfg.b_cv)]
    vals, _ = _run_cells(data, [learner], evaluator, cells, make, cfg.max_redraws)
    est = np.nanmean(vals.reshape(cfg.b_boot, cfg.b_cv), axis=1)
    est = est[~np.isnan(est)]
    return NaiveBootstrapResult(est, float(np.var(est, ddof=1)))


# ---------------------------------------------------------------------------
# K-fold pre-validation and ROC curves


def _partition(n: int, k: int, rng) -> np.ndarray:
    fold = np.empty(n, dtype=int)
    fold[rng.permutation(n)] = np.arange(n) % k
    return fold


def prevalidated_scores(data: Dataset, learner, fold: np.ndarray, k: int, w=None) -> np.ndarray:
    """Score every row with the model fit on the other folds (NaN if any fit failed)."""
    w = np.ones(data.n) if w is None else np.asarray(w, dtype=float)
    w_train = np.stack([w * (fold != f) for f in range(k)])
    scores = batch_scores(data, learner, w_train)
    return scores[fold, np.arange(data.n)]


def _check_binary(data: Dataset) -> None:
    validate(data)
    if data.outcome_kind != "binary":
        raise NonBinaryOutcome("ROC curves need a binary outcome")
    if np.unique(data.outcome).size < 2:
        raise OneClass("ROC curves need both outcome classes")


def _prevalidated_roc(data, learner, k, grid, seed, tag, b, rep, w, max_redraws):
    for attempt in range(max_redraws + 1):
        fold = _partition(data.n, k, rs.cell_rng(seed, tag, b, rep, attempt))
        s = prevalidated_scores(data, learner, fold, k, w)
        if np.isnan(s).any():
            continue
        try:
            return roc_prevalidated(s, data.outcome, grid, w)
        except OneClass:
            continue
    return None


def kfold_prevalidate(
    data: Dataset,
    learner,
    k: int = 10,
    reps: int = 1,
    seed: int = 0,
    grid=None,
    max_redraws: int = 100,
) -> RocCurve:
    """Pre-validated ROC curve averaged pointwise over ``reps`` random K-partitions."""
    _check_binary(data)
    if not 2 <= k <= data.n:
        raise ValueError(f"k must lie in [2, {data.n}], got {k}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    grid = DEFAULT_ROC_GRID if grid is None else np.asarray(grid, dtype=float)
    curves = []
    for r in range(reps):
        c = _prevalidated_roc(data, learner, k, grid, seed, rs.KFOLD, 0, r, None, max_redraws)
        if c is None:
            raise DegenerateFold(f"every K-partition of rep {r} had a failed fit")
        curves.append(c)
    return RocCurve(
        grid,
        np.mean([c.sensitivity for c in curves], axis=0),
        float(np.mean([c.auc for c in curves])),
        float(np.mean([c.auc_grid for c in curves])),
    )


def resubstitution_roc(data: Dataset, learner, grid=None) -> RocCurve:
    """ROC of the model fit on all rows and scored on the same rows (optimistic)."""
    _check_binary(data)
    scores = batch_scores(data, learner, np.ones((1, data.n)))[0]
    if np.isnan(scores).any():
        raise DegenerateFold("the full-data fit failed")
    return roc_prevalidated(scores, data.outcome, grid)


@dataclass
class CurveReport:
    """Pointwise bootstrap inference for a pre-validated ROC curve."""

    curve: RocCurve
    se: np.ndarray
    se_adj: np.ndarray
    ci: np.ndarray
    ci_adj: np.ndarray
    components: list[VarianceComponents]
    k: int
    k_adj: int
    b_boot: int
    b_cv: int
    alpha: float
    missing_cells: int = 0
    notes: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        """Flat (grid, value, se, ci_lo, ci_hi) records."""
        c = self.curve
        return [
            {
                "grid": float(u), "specificity": float(1 - u), "value": float(v),
                "se": float(s), "se_adj": float(sa),
                "ci_lo": float(lo), "ci_hi": float(hi),
                "ci_adj_lo": float(alo), "ci_adj_hi": float(ahi),
            }
            for u, v, s, sa, (lo, hi), (alo, ahi) in zip(
                c.grid, c.sensitivity, self.se, self.se_adj, self.ci, self.ci_adj
            )
        ]


def kfold_roc_bootstrap(
    data: Dataset, learner, cfg: RunConfig, reps: int = 1, grid=None
) -> CurveReport:
    """Pre-validated ROC with pointwise bootstrap CIs.

    Each bootstrap row reruns weighted ``kfold_k_adj``-fold pre-validation
    ``b_cv`` times; variance components are estimated per grid point.
    """
    k = cfg.kfold_k or 10
    k_adj = cfg.kfold_k_adj or k
    if not 2 <= max(k, k_adj) <= data.n:
        raise ValueError("fold counts must lie in [2, n]")
    grid = DEFAULT_ROC_GRID if grid is None else np.asarray(grid, dtype=float)
    curve = kfold_prevalidate(data, learner, k, reps, cfg.seed, grid, cfg.max_redraws)
    n = data.n
    theta = np.full((cfg.b_boot, cfg.b_cv, grid.size), np.nan)
    for b in range(cfg.b_boot):
        w = rs.draw_boot_weights(n, rs.cell_rng(cfg.seed, rs.BOOT, b)).w.astype(float)
        for j in range(cfg.b_cv):
            c = _prevalidated_roc(data, learner, k_adj, grid, cfg.seed, rs.SPLIT, b, j, w,
                                  cfg.max_redraws)
            if c is not None:
                theta[b, j] = c.sensitivity
    # distinct training rows under the bootstrap: roughly (k_adj - 1)/k_adj of n
    m_eff = min(n - 1, round(n * (k_adj - 1) / k_adj))
    adj = rs.adjustment_factor(n, m_eff)
    comps = []
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for g in range(grid.size):
            comps.append(estimate_components(ThetaMatrix(theta[:, :, g]), adj))
    if caught:
        notes.append(f"{len(caught)} grid points had a clamped between-bootstrap variance")
    se = np.array([c.sigma_bt for c in comps])
    se_adj = se * math.sqrt(adj)
    ci = np.array([normal_ci(v, s, cfg.alpha) for v, s in zip(curve.sensitivity, se)])
    ci_adj = np.array([normal_ci(v, s, cfg.alpha) for v, s in zip(curve.sensitivity, se_adj)])
    return CurveReport(curve, se, se_adj, ci, ci_adj, comps, k, k_adj, cfg.b_boot, cfg.b_cv,
                       cfg.alpha, int(np.isnan(theta[:, :, 0]).sum()), notes)

"""Performance functionals evaluated on a weighted test fold.

All weights are frequency weights: a weight-w row counts as w copies.
Each evaluator works on a single view (``evaluate``) and on a batch of K
weight vectors over the same rows (``evaluate_batch``), which returns NaN
for cells where the functional is undefined (zero weight, one class, empty
subgroup arm).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DegenerateFold, EmptySubgroupArm, FoldError, MissingTreatment, OneClass, OneClassFold
from .resampling import WeightedView

DEFAULT_ROC_GRID = np.round(np.arange(1, 20) * 0.05, 2)


# ---------------------------------------------------------------------------
# array-level functionals


def weighted_mape(y, pred, w) -> float:
    tot = float(np.sum(w))
    if tot <= 0:
        raise DegenerateFold("test fold has total weight 0")
    return float(np.sum(w * np.abs(y - pred)) / tot)


def weighted_c_index(scores, y, w=None, strict: bool = False) -> float:
    """Weighted concordance between scores and a binary outcome.

    Pairs (control i, case j) count w_i w_j when s_i < s_j and half that on
    ties (nothing on ties when ``strict``).
    """
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(y)
    w = np.ones(scores.size) if w is None else np.asarray(w, dtype=float)
    ctrl = (y == 0) & (w > 0)
    case = (y == 1) & (w > 0)
    w0, w1 = w[ctrl], w[case]
    tot0, tot1 = w0.sum(), w1.sum()
    if tot0 <= 0 or tot1 <= 0:
        raise OneClassFold("both outcome classes need positive weight")
    order = np.argsort(scores[ctrl], kind="mergesort")
    s0 = scores[ctrl][order]
    cum = np.concatenate([[0.0], np.cumsum(w0[order])])
    s1 = scores[case]
    below = cum[np.searchsorted(s0, s1, side="left")]
    if strict:
        return float(w1 @ below / (tot0 * tot1))
    ties = cum[np.searchsorted(s0, s1, side="right")] - below
    return float(w1 @ (below + 0.5 * ties) / (tot0 * tot1))


def weighted_median(values, w) -> float:
    order = np.argsort(values, kind="mergesort")
    cw = np.cumsum(np.asarray(w, dtype=float)[order])
    return float(np.asarray(values)[order][np.searchsorted(cw, 0.5 * cw[-1])])


def subgroup_effect(y, g, scores, w, side: str = "positive", cutoff: float = 0.0) -> float:
    """Treated-minus-control weighted mean outcome inside the recommended subgroup."""
    if side == "positive":
        sel = scores > cutoff
    elif side == "nonpositive":
        sel = scores <= cutoff
    else:
        raise ValueError(f"side must be 'positive' or 'nonpositive', got {side!r}")
    ws = np.where(sel, w, 0.0)
    wt = ws * g
    wc = ws * (1 - g)
    st, sc = wt.sum(), wc.sum()
    if st <= 0 or sc <= 0:
        raise EmptySubgroupArm(f"a treatment arm is empty inside the {side} subgroup")
    return float(wt @ y / st - wc @ y / sc)


# ---------------------------------------------------------------------------
# ROC


@dataclass(frozen=True, eq=False)
class RocCurve:
    """ROC(u) = S1(S0^{-1}(u)) on a grid of false-positive fractions u.

    ``specificity`` is 1 - u. ``auc`` is the exact pairwise AUC (ties count
    one half); ``auc_grid`` is the trapezoid area over (0, grid, 1).
    """

    grid: np.ndarray
    sensitivity: np.ndarray
    auc: float
    auc_grid: float

    @property
    def specificity(self) -> np.ndarray:
        return 1.0 - self.grid


def _roc_points(scores, y, w, grid):
    ctrl = (y == 0) & (w > 0)
    case = (y == 1) & (w > 0)
    tot0, tot1 = w[ctrl].sum(), w[case].sum()
    if tot0 <= 0 or tot1 <= 0:
        raise OneClass("ROC needs both outcome classes")
    t, inv = np.unique(scores[ctrl], return_inverse=True)
    wt = np.bincount(inv, weights=w[ctrl], minlength=t.size)
    # survival of controls at each distinct control score: weight strictly above
    surv0 = (tot0 - np.cumsum(wt)) / tot0
    # smallest threshold whose control survival is <= u
    pos = np.searchsorted(-surv0, -np.asarray(grid), side="left")
    thresh = t[np.minimum(pos, t.size - 1)]
    s1 = scores[case]
    w1 = w[case]
    return np.array([w1[s1 > c].sum() for c in thresh]) / tot1


def roc_prevalidated(scores, outcome, grid=None, weights=None) -> RocCurve:
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(outcome)
    w = np.ones(scores.size) if weights is None else np.asarray(weights, dtype=float)
    grid = DEFAULT_ROC_GRID if grid is None else np.asarray(grid, dtype=float)
    sens = _roc_points(scores, y, w, grid)
    auc = weighted_c_index(scores, y, w)
    u = np.concatenate([[0.0], grid, [1.0]])
    r = np.concatenate([[0.0], sens, [1.0]])
    auc_grid = float(np.sum(np.diff(u) * (r[1:] + r[:-1]) / 2))
    return RocCurve(grid, sens, auc, auc_grid)


# ---------------------------------------------------------------------------
# evaluator objects


class Evaluator:
    """Evaluator plugin contract: ``evaluate(test_view, model) -> float``."""

    name = "evaluator"
    needs_binary = False
    needs_treatment = False
    n_outputs = 1

    def __call__(self, test: WeightedView, model) -> float:
        return self.evaluate(test, model)

    def evaluate(self, test: WeightedView, model) -> float:
        scores = model.score(test.features)
        return self._value(test.y, test.treatment, scores, np.asarray(test.w, float), None)

    def evaluate_batch(self, y, g, scores, w_test, w_train=None) -> np.ndarray:
        """Values for K cells; ``scores`` and weights are (K, n) over all rows."""
        out = np.full(w_test.shape[0], np.nan)
        for k in range(w_test.shape[0]):
            keep = w_test[k] > 0
            if not keep.any():
                continue
            try:
                out[k] = self._value(
                    y[keep], None if g is None else g[keep], scores[k, keep], w_test[k, keep],
                    None if w_train is None else (scores[k], w_train[k]),
                )
            except FoldError:
                pass
        return out

    def _value(self, y, g, scores, w, train) -> float:
        raise NotImplementedError


class MAPE(Evaluator):
    name = "mape"

    def _value(self, y, g, scores, w, train):
        return weighted_mape(y, scores, w)

    def evaluate_batch(self, y, g, scores, w_test, w_train=None):
        tot = w_test.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.sum(w_test * np.abs(y[None, :] - scores), axis=1) / tot
        val[tot <= 0] = np.nan
        return val


class CIndex(Evaluator):
    name = "c_index"
    needs_binary = True

    def __init__(self, strict: bool = False):
        self.strict = strict

    # pairwise broadcasting is cheaper than per-cell sorting below this size
    PAIRWISE_MAX_N = 400

    def _value(self, y, g, scores, w, train):
        return weighted_c_index(scores, y, w, self.strict)

    def evaluate_batch(self, y, g, scores, w_test, w_train=None):
        if y.size > self.PAIRWISE_MAX_N:
            return super().evaluate_batch(y, g, scores, w_test, w_train)
        case = y == 1
        s0, s1 = scores[:, ~case], scores[:, case]
        w0, w1 = w_test[:, ~case], w_test[:, case]
        tot0, tot1 = w0.sum(axis=1), w1.sum(axis=1)
        out = np.empty(scores.shape[0])
        step = max(1, 2_000_000 // max(1, s0.shape[1] * s1.shape[1]))
        for lo in range(0, scores.shape[0], step):
            sl = slice(lo, lo + step)
            d = s1[sl, None, :] - s0[sl, :, None]
            hit = (d > 0).astype(float)
            if not self.strict:
                hit += 0.5 * (d == 0)
            out[sl] = np.einsum("ki,kij,kj->k", w0[sl], hit, w1[sl])
        with np.errstate(invalid="ignore", divide="ignore"):
            out = out / (tot0 * tot1)
        out[(tot0 <= 0) | (tot1 <= 0)] = np.nan
        return out


class SubgroupATE(Evaluator):
    """Observed treatment effect among rows the score recommends (or not) for treatment.

    ``cutoff`` is a number or ``"train_median"`` (weighted median of the
    training-fold scores).
    """

    needs_treatment = True

    def __init__(self, side: str = "positive", cutoff: Union[float, str] = 0.0):
        if side not in ("positive", "nonpositive"):
            raise ValueError(f"side must be 'positive' or 'nonpositive', got {side!r}")
        self.side = side
        self.cutoff = cutoff
        self.name = f"ate_{side}"

    def evaluate(self, test, model, train: Optional[WeightedView] = None):
        if test.treatment is None:
            raise MissingTreatment("subgroup effects need a treatment column")
        tr = None
        if train is not None:
            tr = (model.score(train.features), np.asarray(train.w, float))
        scores = model.score(test.features)
        return self._value(test.y, test.treatment, scores, np.asarray(test.w, float), tr)

    def _cut(self, train):
        if self.cutoff == "train_median":
            if train is None:
                raise ValueError("the train_median cutoff needs the training fold")
            s, w = train
            return weighted_median(s[w > 0], w[w > 0])
        return float(self.cutoff)

    def _value(self, y, g, scores, w, train):
        return subgroup_effect(y, g, scores, w, self.side, self._cut(train))

    def evaluate_batch(self, y, g, scores, w_test, w_train=None):
        if g is None:
            raise MissingTreatment("subgroup effects need a treatment column")
        if self.cutoff == "train_median":
            return super().evaluate_batch(y, g, scores, w_test, w_train)
        c = float(self.cutoff)
        sel = scores > c if self.side == "positive" else scores <= c
        ws = np.where(sel, w_test, 0.0)
        wt, wc = ws * g, ws * (1 - g)
        st, sc = wt.sum(axis=1), wc.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = (wt @ y) / st - (wc @ y) / sc
        val[(st <= 0) | (sc <= 0)] = np.nan
        return val


def make_evaluator(name: str) -> Evaluator:
    table = {
        "mape": MAPE,
        "c_index": CIndex,
        "c_index_strict": lambda: CIndex(strict=True),
        "ate_positive": lambda: SubgroupATE("positive"),
        "ate_nonpositive": lambda: SubgroupATE("nonpositive"),
    }
    if name not in table:
        raise ValueError(f"unknown metric {name!r}; expected one of {sorted(table)}")
    return table[name]()


def mape(test: WeightedView, model) -> float:
    return MAPE().evaluate(test, model)


def c_index(test: WeightedView, model, strict: bool = False) -> float:
    return CIndex(strict).evaluate(test, model)


def subgroup_ate(test: WeightedView, model, side: str = "positive", cutoff=0.0) -> float:
    return SubgroupATE(side, cutoff).evaluate(test, model)

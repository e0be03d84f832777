"""Shared data model: datasets, splits, bootstrap weights, theta matrices, reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyArm, NonBinaryOutcome

OutcomeKind = Literal["continuous", "binary"]


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of (features, outcome, optional treatment arm).

    Arrays are copied and made read-only so a dataset can be shared across
    workers without defensive copies.
    """

    features: np.ndarray
    outcome: np.ndarray
    treatment: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    outcome_kind: OutcomeKind = "continuous"
    feature_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "outcome", _frozen(np.asarray(self.outcome, dtype=float).ravel()))
        if self.treatment is not None:
            object.__setattr__(
                self, "treatment", _frozen(np.asarray(self.treatment, dtype=float).ravel())
            )
        ids = np.arange(x.shape[0]) if self.ids is None else self.ids
        object.__setattr__(self, "ids", _frozen(ids))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def design(self) -> np.ndarray:
        """Features with a leading intercept column (the Z-tilde design)."""
        return np.column_stack([np.ones(self.n), self.features])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            features=self.features[idx],
            outcome=self.outcome[idx],
            treatment=None if self.treatment is None else self.treatment[idx],
            ids=self.ids[idx],
            outcome_kind=self.outcome_kind,
            feature_names=self.feature_names,
        )


def validate(dataset: Dataset) -> Dataset:
    """Check the dataset invariants and return it unchanged.

    Raises NonBinaryOutcome, EmptyArm or DimensionMismatch.
    """
    n = dataset.features.shape[0]
    if dataset.features.ndim != 2 or dataset.p < 1:
        raise DimensionMismatch("features must be an n x p matrix with p >= 1")
    if n < 2:
        raise DimensionMismatch(f"need at least 2 rows, got {n}")
    if dataset.outcome.shape[0] != n:
        raise DimensionMismatch(
            f"outcome has {dataset.outcome.shape[0]} rows, features have {n}"
        )
    if dataset.ids.shape[0] != n:
        raise DimensionMismatch("ids length does not match the number of rows")
    if not np.all(np.isfinite(dataset.features)) or not np.all(np.isfinite(dataset.outcome)):
        raise DimensionMismatch("features and outcome must be finite")
    if dataset.outcome_kind == "binary":
        bad = ~np.isin(dataset.outcome, (0.0, 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonBinaryOutcome(
                f"outcome declared binary but row {i} has value {dataset.outcome[i]!r}"
            )
    elif dataset.outcome_kind != "continuous":
        raise ValueError(f"unknown outcome kind {dataset.outcome_kind!r}")
    if dataset.treatment is not None:
        g = dataset.treatment
        if g.shape[0] != n:
            raise DimensionMismatch("treatment length does not match the number of rows")
        if not np.all(np.isin(g, (0.0, 1.0))):
            raise NonBinaryOutcome("treatment must be coded 0/1")
        if g.sum() == 0 or g.sum() == n:
            raise EmptyArm("both treatment arms must be nonempty")
    return dataset


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "train_idx", _frozen(self.train_idx, dtype=np.intp))
        object.__setattr__(self, "test_idx", _frozen(self.test_idx, dtype=np.intp))
        n = self.n
        if not 1 <= self.m <= n - 1:
            raise ValueError(f"training size must lie in [1, {n - 1}], got {self.m}")
        seen = np.zeros(n, dtype=int)
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.min() < 0 or both.max() >= n:
            raise ValueError("split indices must lie in [0, n)")
        np.add.at(seen, both, 1)
        if not np.all(seen == 1):
            raise ValueError("train and test indices must partition 0..n-1")

    @property
    def n(self) -> int:
        return self.train_idx.size + self.test_idx.size

    @property
    def m(self) -> int:
        return self.train_idx.size

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        train = np.zeros(self.n, dtype=bool)
        train[self.train_idx] = True
        return train, ~train


@dataclass(frozen=True, eq=False)
class BootWeights:
    """Integer multiplicities of one multinomial(n; 1/n, ..., 1/n) draw."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w, dtype=np.int64))
        if self.w.ndim != 1 or (self.w < 0).any():
            raise ValueError("bootstrap weights must be a vector of nonnegative integers")
        if self.w.sum() != self.w.size:
            raise ValueError(f"bootstrap weights must sum to n={self.w.size}, got {self.w.sum()}")

    @property
    def n(self) -> int:
        return self.w.size

    @classmethod
    def unit(cls, n: int) -> "BootWeights":
        return cls(np.ones(n, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ThetaMatrix:
    """B_BOOT x B_CV bootstrapped cross-validation values.

    NaN marks a missing cell (degenerate fold after redraw exhaustion);
    infinite entries are rejected.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("theta values must be a 2-D array")
        if np.isinf(v).any():
            raise ValueError("theta values must be finite (NaN marks a missing cell)")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def b_boot(self) -> int:
        return self.values.shape[0]

    @property
    def b_cv(self) -> int:
        return self.values.shape[1]

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())


@dataclass(frozen=True)
class VarianceComponents:
    sigma_bt_sq: float
    tau0_sq: float
    sigma_bt_sq_raw: float
    adj_factor: float = 1.0

    @property
    def sigma_bt(self) -> float:
        return float(np.sqrt(self.sigma_bt_sq))


@dataclass
class InferenceReport:
    """Point estimate at training size m with bootstrap standard errors."""

    point: float
    se: float
    se_adj: float
    ci_normal: tuple[float, float]
    ci_adj: tuple[float, float]
    m: int
    m_adj: int
    alpha: float
    components: VarianceComponents
    b_cv_point: int
    b_boot: int
    b_cv: int
    ci_calibrated: Optional[tuple[float, float]] = None
    ci_calibrated_adj: Optional[tuple[float, float]] = None
    c_crit: Optional[float] = None
    redraw_fits: int = 0
    missing_cells: int = 0
    dropped_rows: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def fits_used(self) -> int:
        return self.b_cv_point + self.b_boot * self.b_cv + self.redraw_fits

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fits_used"] = self.fits_used
        d["fits"] = {
            "point": self.b_cv_point,
            "bootstrap": self.b_boot * self.b_cv,
            "redraw": self.redraw_fits,
        }
        return d

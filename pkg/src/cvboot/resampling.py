"""Random splits, bootstrap weights and the training-size adjustment.

Every (b, k) cell of the bootstrap grid gets its own counter-based random
stream keyed by the master seed, so cells can be evaluated in any order (or
in parallel) and still reproduce bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import DegenerateFold, InfeasibleStratification
from .types import BootWeights, Dataset, SplitAssignment

# 1 - exp(-1) as printed (0.632), not computed; keeps hand-derived constants exact.
DISTINCT_FRACTION = 0.632
DEFAULT_LAMBDA0 = 0.368

# stream tags
POINT = 1
BOOT = 2
SPLIT = 3
NAIVE = 4
CALIB = 5
KFOLD = 6
SIM = 7


@lru_cache(maxsize=64)
def _philox_key(seed: int) -> tuple[int, int]:
    state = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def cell_rng(seed: int, tag: int, b: int = 0, k: int = 0, attempt: int = 0) -> np.random.Generator:
    """Independent stream for one grid cell.

    The Philox counter's low word is left at zero for the stream's own use;
    the upper words carry (tag, attempt, k, b).
    """
    key = np.array(_philox_key(int(seed)), dtype=np.uint64)
    counter = np.array([0, (tag << 32) | attempt, k, b], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


@dataclass(frozen=True)
class SplitConfig:
    m: int
    stratify_on_outcome: bool = False
    max_redraws: int = 100

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"training size must be >= 1, got {self.m}")
        if self.max_redraws < 0:
            raise ValueError("max_redraws must be >= 0")


def _stratum_quotas(outcome: np.ndarray, m: int) -> dict[float, int]:
    n = outcome.size
    classes, counts = np.unique(outcome, return_counts=True)
    exact = m * counts / n
    quota = np.floor(exact).astype(int)
    # largest remainder so quotas sum to m
    short = m - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:short]] += 1
    for c, q, size in zip(classes, quota, counts):
        if q < 1 or size < q + 1:
            raise InfeasibleStratification(
                f"class {c:g} has {size} members; a stratified split with m={m} "
                f"needs {max(q, 1) + 1} (train quota {q} plus one test row)"
            )
    return dict(zip(classes.tolist(), quota.tolist()))


def draw_split(
    n: int,
    config: SplitConfig,
    rng: np.random.Generator,
    outcome: Optional[np.ndarray] = None,
) -> SplitAssignment:
    """Uniformly random size-m training set; the rest is the test set."""
    m = config.m
    if not 1 <= m <= n - 1:
        raise ValueError(f"training size must lie in [1, {n - 1}], got {m}")
    if config.stratify_on_outcome:
        if outcome is None:
            raise ValueError("stratified splitting needs the outcome column")
        outcome = np.asarray(outcome)
        train = []
        for c, q in _stratum_quotas(outcome, m).items():
            members = np.flatnonzero(outcome == c)
            train.append(rng.permutation(members)[:q])
        train_idx = np.sort(np.concatenate(train))
        mask = np.ones(n, dtype=bool)
        mask[train_idx] = False
        return SplitAssignment(train_idx, np.flatnonzero(mask))
    perm = rng.permutation(n)
    return SplitAssignment(np.sort(perm[:m]), np.sort(perm[m:]))


def train_mask(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean training mask of a simple random split (hot path of the engine)."""
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:m]] = True
    return mask


def draw_boot_weights(n: int, rng: np.random.Generator) -> BootWeights:
    """One multinomial(n; 1/n, ..., 1/n) draw, as counts of n uniform picks."""
    return BootWeights(np.bincount(rng.integers(0, n, size=n), minlength=n))


def size_objective(n: int, m: int, m_adj, lambda0: float = DEFAULT_LAMBDA0):
    """Trade-off between distinct training rows (0.632 m_adj, target m) and test-set shrinkage."""
    m_adj = np.asarray(m_adj, dtype=float)
    return (DISTINCT_FRACTION * m_adj / m - 1.0) ** 2 + lambda0 * (
        (n - m) / (n - m_adj) - 1.0
    ) ** 2


def solve_m_adj(n: int, m: int, lambda0: float = DEFAULT_LAMBDA0) -> int:
    """Enlarged training size for bootstrap cross-validation.

    Exhaustive search over the integers m..n-1; ties go to the smaller size.
    """
    if not 1 <= m <= n - 1:
        raise ValueError(f"training size must lie in [1, {n - 1}], got {m}")
    if lambda0 < 0:
        raise ValueError("lambda0 must be nonnegative")
    candidates = np.arange(m, n)
    return int(candidates[np.argmin(size_objective(n, m, candidates, lambda0))])


def adjustment_factor(n: int, m_adj: int) -> float:
    """Variance deflation (n - 0.368 m_adj) / n for the reduced distinct training size."""
    if not 0 <= m_adj <= n - 1:
        raise ValueError(f"m_adj must lie in [0, {n - 1}], got {m_adj}")
    return (n - (1.0 - DISTINCT_FRACTION) * m_adj) / n


@dataclass(frozen=True, eq=False)
class WeightedView:
    """Rows ``idx`` of a dataset carrying bootstrap multiplicities ``w``.

    Zero-weight rows stay in the view; learners and evaluators must honor
    the weights.
    """

    data: Dataset
    idx: np.ndarray
    w: np.ndarray

    @property
    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.idx.size), self.data.features[self.idx]])

    @property
    def features(self) -> np.ndarray:
        return self.data.features[self.idx]

    @property
    def y(self) -> np.ndarray:
        return self.data.outcome[self.idx]

    @property
    def treatment(self) -> Optional[np.ndarray]:
        g = self.data.treatment
        return None if g is None else g[self.idx]

    @property
    def total_weight(self) -> float:
        return float(self.w.sum())

    def full_weights(self) -> np.ndarray:
        """Weights over all n rows of the parent dataset, zero outside the view."""
        out = np.zeros(self.data.n)
        out[self.idx] = self.w
        return out

    @classmethod
    def unweighted(cls, data: Dataset, idx=None) -> "WeightedView":
        idx = np.arange(data.n) if idx is None else np.asarray(idx)
        return cls(data, idx, np.ones(idx.size))


def weighted_fold(
    data: Dataset, split: SplitAssignment, weights: BootWeights
) -> tuple[WeightedView, WeightedView]:
    if split.n != data.n or weights.n != data.n:
        raise ValueError("split, weights and data must cover the same rows")
    w = weights.w.astype(float)
    train = WeightedView(data, split.train_idx, w[split.train_idx])
    test = WeightedView(data, split.test_idx, w[split.test_idx])
    if train.total_weight == 0:
        raise DegenerateFold("training view has total weight 0")
    if test.total_weight == 0:
        raise DegenerateFold("test view has total weight 0")
    return train, test

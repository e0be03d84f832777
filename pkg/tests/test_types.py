import numpy as np
import pytest

from cvboot.errors import DimensionMismatch, EmptyArm, NonBinaryOutcome
from cvboot.types import BootWeights, Dataset, SplitAssignment, ThetaMatrix, validate


def test_binary_outcome_accepted():
    d = Dataset(np.zeros((3, 1)), [0, 1, 1], outcome_kind="binary")
    assert validate(d) is d


def test_non_binary_outcome_rejected():
    with pytest.raises(NonBinaryOutcome):
        validate(Dataset(np.zeros((2, 1)), [0, 0.5], outcome_kind="binary"))


def test_treatment_single_arm_rejected():
    with pytest.raises(EmptyArm):
        validate(Dataset(np.zeros((3, 1)), [1.0, 2.0, 3.0], treatment=[1, 1, 1]))


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        validate(Dataset(np.zeros((3, 2)), [1.0, 2.0]))
    with pytest.raises(DimensionMismatch):
        validate(Dataset(np.zeros((1, 2)), [1.0]))


def test_dataset_is_read_only_and_keeps_ids():
    x = np.arange(6.0).reshape(3, 2)
    d = Dataset(x, [1, 2, 3], ids=np.array([10, 20, 30]))
    x[0, 0] = 99
    assert d.features[0, 0] == 0
    with pytest.raises(ValueError):
        d.features[0, 0] = 1
    sub = d.subset([2, 0])
    assert list(sub.ids) == [30, 10]
    assert d.design.shape == (3, 3) and np.all(d.design[:, 0] == 1)


def test_split_assignment_invariants():
    s = SplitAssignment(np.array([0, 2]), np.array([1, 3, 4]))
    assert (s.n, s.m) == (5, 2)
    tr, te = s.masks()
    assert np.all(tr ^ te)
    with pytest.raises(ValueError):
        SplitAssignment(np.array([0, 1]), np.array([1, 2]))
    with pytest.raises(ValueError):
        SplitAssignment(np.array([], dtype=int), np.array([0, 1]))


def test_boot_weights_must_sum_to_n():
    assert BootWeights.unit(4).w.sum() == 4
    with pytest.raises(ValueError):
        BootWeights(np.array([2, 0, 0]))
    with pytest.raises(ValueError):
        BootWeights(np.array([4, -1, 0]))


def test_theta_matrix_checks():
    t = ThetaMatrix(np.array([[1.0, np.nan], [2.0, 3.0]]))
    assert (t.b_boot, t.b_cv, t.n_missing) == (2, 2, 1)
    with pytest.raises(ValueError):
        ThetaMatrix(np.array([[1.0, np.inf], [2.0, 3.0]]))
    with pytest.raises(ValueError):
        ThetaMatrix(np.array([1.0, 2.0]))

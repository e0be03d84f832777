"""Confidence intervals for cross-validated performance estimates via a fast bootstrap."""

from .engine import (
    CurveReport,
    NaiveBootstrapResult,
    RunConfig,
    compare_models,
    cross_validate,
    fast_bootstrap,
    kfold_prevalidate,
    kfold_roc_bootstrap,
    naive_bootstrap,
    paired_theta,
    pilot_allocate,
    resubstitution_roc,
)
from .learners import LearnerSpec, make_learner
from .metrics import make_evaluator, roc_prevalidated
from .types import BootWeights, Dataset, InferenceReport, SplitAssignment, ThetaMatrix, validate

__version__ = "0.1.0"

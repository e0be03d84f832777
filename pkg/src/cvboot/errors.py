"""Exception hierarchy.

Every error carries a stable ``code`` string so the CLI can emit a
machine-readable error object.
"""

from __future__ import annotations


class CvbootError(Exception):
    code = "cvboot_error"

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


class ValidationError(CvbootError, ValueError):
    code = "validation_error"


class NonBinaryOutcome(ValidationError):
    code = "non_binary_outcome"


class EmptyArm(ValidationError):
    code = "empty_arm"


class DimensionMismatch(ValidationError):
    code = "dimension_mismatch"


class MissingTreatment(ValidationError):
    code = "missing_treatment"


class InfeasibleStratification(CvbootError):
    code = "infeasible_stratification"


class FoldError(CvbootError):
    """A single (train, test) cell could not be evaluated.

    The engine treats every subclass as a degenerate fold and redraws.
    """

    code = "fold_error"


class DegenerateFold(FoldError):
    code = "degenerate_fold"


class OneClassFold(FoldError):
    code = "one_class_fold"


class EmptySubgroupArm(FoldError):
    code = "empty_subgroup_arm"


class Separation(FoldError):
    code = "separation"


class SingularDesign(FoldError):
    code = "singular_design"


class NonConvergence(FoldError):
    code = "non_convergence"


class OneClass(ValidationError):
    code = "one_class"


class InsufficientReplication(CvbootError):
    code = "insufficient_replication"


class ZeroBetweenVariance(CvbootError):
    code = "zero_between_variance"


class CalibrationDegenerate(CvbootError):
    code = "calibration_degenerate"


class IngestError(CvbootError):
    code = "ingest_error"


class MissingColumn(IngestError):
    code = "missing_column"


class NonNumericCell(IngestError):
    code = "non_numeric_cell"

    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"non-numeric value {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.value = value

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(row=self.row, column=self.column)
        return d


class EmptyAfterFiltering(IngestError):
    code = "empty_after_filtering"

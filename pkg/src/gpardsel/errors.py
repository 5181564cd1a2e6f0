"""Exception types shared across the package."""

from __future__ import annotations


class GpardselError(Exception):
    """Base class for all package-specific errors."""


class ConstantColumn(GpardselError):
    """A column has (numerically) zero variance and cannot be standardized.

    ``column`` is the 0-based column index, or -1 for a probe vector that is
    not part of a design matrix.
    """

    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"column {column} has zero variance")


class NegativeLengthScale(GpardselError):
    """An inverse length-scale entry is negative."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"inverse length-scale {index} is negative")


class NonPositiveVariance(GpardselError):
    """A variance parameter is zero or negative."""


class NonPositiveValue(GpardselError):
    """A strictly positive argument was zero or negative."""


class NotPositiveDefinite(GpardselError):
    """Cholesky factorization failed even at the maximum allowed jitter."""


class DecompositionFailure(GpardselError):
    """An eigendecomposition did not converge."""


class EmptyInput(GpardselError):
    """An operation received an empty collection."""


class DomainMismatch(GpardselError):
    """Response values do not conform to the likelihood family."""


class NewtonDivergence(GpardselError):
    """The latent-mode Newton iteration failed to converge."""


class AllRestartsFailed(GpardselError):
    """Every optimizer restart (or too many augmentation fits) failed."""


class PCAIndexOutOfRange(GpardselError):
    """Requested a PCA tail column beyond the number of components."""

    def __init__(self, m: int, k: int):
        self.m = m
        self.k = k
        super().__init__(f"tail column {m} requested but only {k} components exist")


class DimensionMismatch(GpardselError):
    """Array shapes are inconsistent."""


class ConfigError(GpardselError):
    """Invalid run configuration (maps to CLI exit code 2)."""


class ParseError(GpardselError):
    """A CSV cell could not be parsed; carries 1-based row and column name."""

    def __init__(self, row: int, col: str, message: str):
        self.row = row
        self.col = col
        super().__init__(f"row {row}, column {col!r}: {message}")


class MissingColumn(GpardselError):
    """A required column is absent from the CSV header."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"column {name!r} not found in header")

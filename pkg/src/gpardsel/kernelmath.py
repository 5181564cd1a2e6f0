"""Deterministic numerical primitives.

Column standardization, pairwise squared differences, the inverse-RBF
covariance, Cholesky solves with a jitter-escalation policy, PCA,
interpolated percentiles, and Pearson-correlation utilities. Everything here
is a pure function over immutable inputs; stored arrays are marked
read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve

from .errors import (
    ConstantColumn,
    DecompositionFailure,
    EmptyInput,
    NegativeLengthScale,
    NonPositiveVariance,
    NotPositiveDefinite,
)

# Jitter escalation: start at JITTER_REL * sigma2 and multiply by 10 until
# JITTER_REL_MAX * sigma2, then give up with NotPositiveDefinite.
JITTER_REL = 1e-8
JITTER_REL_MAX = 1e-2

_SD_FLOOR = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=float)
    out.setflags(write=False)
    return out


def _as_matrix(X) -> np.ndarray:
    """Coerce a DesignMatrix / array-like to a validated (n, K) float array."""
    data = X.data if isinstance(X, (DesignMatrix, StandardizedDesign)) else X
    A = np.asarray(data, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {A.shape}")
    n, k = A.shape
    if n < 2 or k < 1:
        raise ValueError(f"need at least 2 rows and 1 column, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix contains non-finite entries")
    return A


@dataclass(frozen=True)
class DesignMatrix:
    """An n x K design matrix; rows are observations, columns are features."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(_as_matrix(self.data)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StandardizedDesign:
    """Column-standardized design with the statistics used to produce it.

    ``data`` has column means 0 and sample standard deviations 1 (divisor
    n - 1). ``col_means`` / ``col_scales`` are the statistics of the source
    matrix, kept so test-time data can be mapped through the identical
    transform. ``sqdiff`` is computed lazily: a (K, n, n) stack where
    ``sqdiff[k][i, j] = (x_ik - x_jk)**2`` over the standardized values.
    """

    data: np.ndarray
    col_means: np.ndarray
    col_scales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        object.__setattr__(self, "col_means", _frozen(np.atleast_1d(self.col_means)))
        object.__setattr__(self, "col_scales", _frozen(np.atleast_1d(self.col_scales)))
        if self.col_means.shape != (self.cols,) or self.col_scales.shape != (self.cols,):
            raise ValueError("column statistics do not match the data shape")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @cached_property
    def sqdiff(self) -> np.ndarray:
        cols = self.data.T
        d = cols[:, :, None] - cols[:, None, :]
        return _frozen(d * d)

    @classmethod
    def from_standardized(cls, data) -> "StandardizedDesign":
        """Wrap a matrix whose columns are already mean-0 / sd-1."""
        A = _as_matrix(data)
        if np.max(np.abs(A.mean(axis=0))) > 1e-8:
            raise ValueError("columns are not mean-centered")
        if np.max(np.abs(A.std(axis=0, ddof=1) - 1.0)) > 1e-8:
            raise ValueError("columns do not have unit sample sd")
        k = A.shape[1]
        return cls(data=A, col_means=np.zeros(k), col_scales=np.ones(k))


def standardize(X) -> StandardizedDesign:
    """Center each column and scale it to unit sample standard deviation.

    Raises ConstantColumn(k) when column k has sd <= 1e-12.
    """
    A = _as_matrix(X)
    means = A.mean(axis=0)
    scales = A.std(axis=0, ddof=1)
    bad = np.flatnonzero(scales <= _SD_FLOOR)
    if bad.size:
        raise ConstantColumn(int(bad[0]))
    return StandardizedDesign(data=(A - means) / scales, col_means=means, col_scales=scales)


@dataclass(frozen=True)
class CovMatrix:
    """A symmetric covariance matrix with the jitter already on its diagonal.

    ``sigma2`` records the marginal-variance scale so the jitter-escalation
    cap (JITTER_REL_MAX * sigma2) is well defined even after construction.
    """

    values: np.ndarray
    jitter: float
    sigma2: float

    def __post_init__(self):
        V = np.asarray(self.values, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError(f"covariance must be square, got {V.shape}")
        if not np.all(np.isfinite(V)):
            raise ValueError("covariance contains non-finite entries")
        if np.max(np.abs(V - V.T)) > 1e-12:
            raise ValueError("covariance is not symmetric within 1e-12")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        object.__setattr__(self, "values", _frozen(V))

    @property
    def n(self) -> int:
        return self.values.shape[0]


def weighted_sqdist(A: np.ndarray, ell2: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """sum_k ell2_k * (a_ik - b_jk)^2 for all row pairs, via the Gram trick.

    With B=None the result is exactly symmetric with an exactly zero
    diagonal; entries are clipped at 0 to guard against cancellation.
    """
    root = np.sqrt(ell2)
    As = A * root
    if B is None:
        G = As @ As.T
        s = np.diag(G)
        E = s[:, None] + s[None, :] - 2.0 * G
        np.maximum(E, 0.0, out=E)
        E = np.minimum(E, E.T)
        np.fill_diagonal(E, 0.0)
        return E
    Bs = B * root
    E = (
        np.einsum("ik,ik->i", As, As)[:, None]
        + np.einsum("jk,jk->j", Bs, Bs)[None, :]
        - 2.0 * As @ Bs.T
    )
    np.maximum(E, 0.0, out=E)
    return E


def _check_kernel_params(sigma2: float, ell2, k: int) -> np.ndarray:
    if not sigma2 > 0:
        raise NonPositiveVariance(f"sigma2 must be positive, got {sigma2}")
    e = np.asarray(ell2, dtype=float).ravel()
    if e.shape != (k,):
        raise ValueError(f"expected {k} inverse length-scales, got {e.shape}")
    neg = np.flatnonzero(e < 0)
    if neg.size:
        raise NegativeLengthScale(int(neg[0]))
    return e


def inverse_rbf_cov(sd, sigma2: float, ell2, jitter: float | None = None) -> CovMatrix:
    """Inverse-RBF covariance over one set of points.

    C[i, j] = sigma2 * exp(-0.5 * sum_k ell2_k * (x_ik - x_jk)^2), with
    ``jitter`` added on the diagonal (default JITTER_REL * sigma2). A large
    ell2_k makes differences in feature k collapse the covariance quickly;
    ell2_k = 0 removes the feature from the kernel entirely.
    """
    X = _as_matrix(sd)
    e = _check_kernel_params(sigma2, ell2, X.shape[1])
    if jitter is None:
        jitter = JITTER_REL * sigma2
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    E = weighted_sqdist(X, e)
    C = np.exp(-0.5 * E)
    C *= sigma2
    np.fill_diagonal(C, sigma2 + jitter)
    return CovMatrix(values=C, jitter=float(jitter), sigma2=float(sigma2))


def inverse_rbf_cross(A, B, sigma2: float, ell2) -> np.ndarray:
    """Inverse-RBF cross-covariance block between two point sets (no jitter)."""
    Am = _as_matrix(A)
    Bm = _as_matrix(B)
    if Am.shape[1] != Bm.shape[1]:
        raise ValueError("point sets have different feature counts")
    e = _check_kernel_params(sigma2, ell2, Am.shape[1])
    return sigma2 * np.exp(-0.5 * weighted_sqdist(Am, e, Bm))


def chol_with_escalation(C: CovMatrix) -> tuple[np.ndarray, float]:
    """Cholesky factor of C.values, escalating diagonal jitter on failure.

    Returns (L, total_jitter). Jitter levels are JITTER_REL * sigma2 * 10^t,
    capped at JITTER_REL_MAX * sigma2; levels at or below the jitter already
    present are skipped.
    """
    levels = [C.jitter]
    lv = JITTER_REL * C.sigma2
    while lv <= JITTER_REL_MAX * C.sigma2 * (1 + 1e-15):
        if lv > C.jitter:
            levels.append(lv)
        lv *= 10.0
    for level in levels:
        M = C.values if level == C.jitter else C.values + (level - C.jitter) * np.eye(C.n)
        try:
            return np.linalg.cholesky(M), float(level)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"Cholesky failed at maximum jitter {JITTER_REL_MAX * C.sigma2:.3g}"
    )


def chol_solve_logdet(C: CovMatrix, b) -> tuple[np.ndarray, float]:
    """Solve C x = b and return (x, log|C|) through one Cholesky factorization."""
    v = np.asarray(b, dtype=float).ravel()
    if v.shape != (C.n,):
        raise ValueError(f"b has length {v.shape}, expected {C.n}")
    L, _ = chol_with_escalation(C)
    x = cho_solve((L, True), v, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return x, logdet


@dataclass(frozen=True)
class PCABasis:
    """Orthonormal principal directions of a standardized design.

    ``components`` columns are unit-norm directions in descending eigenvalue
    order; ``transformed`` holds the scores data @ components. The entry of
    largest magnitude in each component is made positive so the
    decomposition is deterministic.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    transformed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", _frozen(self.components))
        object.__setattr__(self, "eigenvalues", _frozen(np.atleast_1d(self.eigenvalues)))
        object.__setattr__(self, "transformed", _frozen(self.transformed))


def pca_fit(sd: StandardizedDesign) -> PCABasis:
    """Eigendecomposition of the sample covariance of the standardized data."""
    X = sd.data
    n = X.shape[0]
    S = X.T @ X / (n - 1)
    S = 0.5 * (S + S.T)
    try:
        evals, vecs = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise DecompositionFailure(str(exc)) from exc
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    vecs = vecs[:, order]
    flip = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])] < 0
    vecs = np.where(flip[None, :], -vecs, vecs)
    return PCABasis(components=vecs, eigenvalues=evals, transformed=X @ vecs)


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile of a nonempty finite sample.

    Sort ascending v_(1..M), set h = (M - 1) * q / 100, and interpolate
    between v_(floor(h)+1) and the next order statistic.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise EmptyInput("percentile of an empty sample")
    if not np.all(np.isfinite(v)):
        raise ValueError("percentile input contains non-finite values")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must lie in [0, 100], got {q}")
    s = np.sort(v)
    h = (s.size - 1) * q / 100.0
    lo = int(np.floor(h))
    frac = h - lo
    if lo + 1 >= s.size or frac == 0.0:
        return float(s[min(lo, s.size - 1)])
    return float(s[lo] + frac * (s[lo + 1] - s[lo]))


def median(values) -> float:
    return percentile(values, 50.0)


def max_abs_corr(x0, X) -> float:
    """Largest absolute Pearson correlation between x0 and the columns of X."""
    v = np.asarray(x0, dtype=float).ravel()
    A = _as_matrix(X)
    if v.shape[0] != A.shape[0]:
        raise ValueError("x0 length does not match the matrix rows")
    vc = v - v.mean()
    sv = v.std(ddof=1)
    if sv <= _SD_FLOOR:
        raise ConstantColumn(-1, "probe vector is constant")
    Ac = A - A.mean(axis=0)
    sa = A.std(axis=0, ddof=1)
    bad = np.flatnonzero(sa <= _SD_FLOOR)
    if bad.size:
        raise ConstantColumn(int(bad[0]))
    n = v.shape[0]
    corr = (vc @ Ac) / ((n - 1) * sv * sa)
    return float(np.clip(np.max(np.abs(corr)), 0.0, 1.0))


__all__ = [
    "DesignMatrix",
    "StandardizedDesign",
    "CovMatrix",
    "PCABasis",
    "standardize",
    "inverse_rbf_cov",
    "inverse_rbf_cross",
    "weighted_sqdist",
    "chol_with_escalation",
    "chol_solve_logdet",
    "pca_fit",
    "percentile",
    "median",
    "max_abs_corr",
    "JITTER_REL",
    "JITTER_REL_MAX",
]

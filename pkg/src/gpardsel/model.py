"""Probability densities for the latent-GP model.

Likelihood families (Gaussian / Bernoulli-logit / Poisson-log), the
exponential shrinkage prior on inverse length-scales, log-normal
hyper-priors, the log joint density over (f, hyperparameters), the exact
Gaussian marginal likelihood, and the Laplace-approximate marginal for
non-Gaussian responses.

Normalization convention: the log joint drops the (n/2) log(2pi) constant of
the latent Gaussian, while ``gaussian_log_marginal`` and
``laplace_objective`` are genuine (approximate) log marginal likelihoods, so

    marginal(y) = log integral exp(log_joint) df - (n/2) log(2pi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

from .errors import (
    DomainMismatch,
    NegativeLengthScale,
    NewtonDivergence,
    NonPositiveValue,
    NonPositiveVariance,
)
from .kernelmath import CovMatrix, chol_solve_logdet

NEWTON_MAX_ITER = 100
NEWTON_TOL_OBJ = 1e-8
NEWTON_TOL_GRAD = 1e-6


@dataclass(frozen=True)
class GaussianIdentity:
    """Gaussian response with identity link; noise_var is the observation variance."""

    noise_var: float = 1.0

    def __post_init__(self):
        if not self.noise_var > 0:
            raise NonPositiveVariance(f"noise_var must be positive, got {self.noise_var}")


@dataclass(frozen=True)
class BernoulliLogit:
    """Binary response with the canonical logit link."""


@dataclass(frozen=True)
class PoissonLog:
    """Count response with the log link."""


LikelihoodFamily = GaussianIdentity | BernoulliLogit | PoissonLog


@dataclass(frozen=True)
class HyperPriors:
    """Hyper-prior settings.

    ``tau`` is the rate of the exponential prior applied to every inverse
    length-scale; tau = 0 switches the prior off (improper flat), the
    no-regularization ablation. The variance parameters get log-normal
    priors with the given log-scale mean and sd.
    """

    tau: float = 2.0
    sigma2_logmean: float = 0.0
    sigma2_logsd: float = 2.0
    noise_logmean: float = 0.0
    noise_logsd: float = 2.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")
        if not (self.sigma2_logsd > 0 and self.noise_logsd > 0):
            raise ValueError("log-normal sd parameters must be positive")


@dataclass(frozen=True)
class Hyperparams:
    """Kernel and noise hyperparameters for one augmented design.

    ``ell2[0]`` is the nuisance column's inverse length-scale when the
    design is augmented; ``noise_var`` is present for Gaussian responses
    only.
    """

    sigma2: float
    ell2: np.ndarray
    noise_var: float | None = None

    def __post_init__(self):
        e = np.asarray(self.ell2, dtype=float).ravel()
        e.setflags(write=False)
        object.__setattr__(self, "ell2", e)
        if not self.sigma2 > 0:
            raise NonPositiveVariance(f"sigma2 must be positive, got {self.sigma2}")
        neg = np.flatnonzero(e < 0)
        if neg.size:
            raise NegativeLengthScale(int(neg[0]))
        if self.noise_var is not None and not self.noise_var > 0:
            raise NonPositiveVariance(f"noise_var must be positive, got {self.noise_var}")


def validate_response(y, fam: LikelihoodFamily) -> np.ndarray:
    """Check that y conforms to the likelihood family; returns y as floats."""
    v = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(v)):
        raise DomainMismatch("response contains non-finite values")
    if isinstance(fam, BernoulliLogit):
        if not np.all(np.isin(v, (0.0, 1.0))):
            raise DomainMismatch("Bernoulli response must contain only 0/1")
    elif isinstance(fam, PoissonLog):
        if np.any(v < 0) or np.any(v != np.floor(v)):
            raise DomainMismatch("Poisson response must be nonnegative integers")
    return v


def _lik_terms(y: np.ndarray, f: np.ndarray, fam: LikelihoodFamily):
    """(log p(y|f), dlogp/df, W = -d2logp/df2, d3logp/df3) for one latent vector."""
    if isinstance(fam, BernoulliLogit):
        p = expit(f)
        logp = float(np.sum(y * f - np.logaddexp(0.0, f)))
        w = p * (1.0 - p)
        return logp, y - p, w, -w * (1.0 - 2.0 * p)
    if isinstance(fam, PoissonLog):
        lam = np.exp(f)
        logp = float(np.sum(y * f - lam - gammaln(y + 1.0)))
        return logp, y - lam, lam, -lam
    nv = fam.noise_var
    r = y - f
    logp = float(-0.5 * y.size * np.log(2.0 * np.pi * nv) - 0.5 * np.sum(r * r) / nv)
    n = y.size
    return logp, r / nv, np.full(n, 1.0 / nv), np.zeros(n)


def log_lik(y, f, fam: LikelihoodFamily) -> float:
    """Sum of log p(y_i | f_i) under the given family."""
    yv = validate_response(y, fam)
    fv = np.asarray(f, dtype=float).ravel()
    if yv.shape != fv.shape:
        raise DomainMismatch(f"y has shape {yv.shape} but f has shape {fv.shape}")
    return _lik_terms(yv, fv, fam)[0]


def log_prior_ell2(ell2, tau: float) -> float:
    """Log density of independent Exponential(tau) priors on the inverse length-scales.

    Returns 0 for tau = 0 (flat improper prior, the no-penalty ablation).
    """
    e = np.asarray(ell2, dtype=float).ravel()
    neg = np.flatnonzero(e < 0)
    if neg.size:
        raise NegativeLengthScale(int(neg[0]))
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    if tau == 0:
        return 0.0
    return float(e.size * np.log(tau) - tau * np.sum(e))


def log_prior_lognormal(v: float, logmean: float, logsd: float) -> float:
    """Log density of a log-normal prior at v, including the -log(v) Jacobian."""
    if not v > 0:
        raise NonPositiveValue(f"log-normal support is (0, inf), got {v}")
    if not logsd > 0:
        raise ValueError("logsd must be positive")
    z = (np.log(v) - logmean) / logsd
    return float(-np.log(v) - np.log(logsd) - 0.5 * np.log(2.0 * np.pi) - 0.5 * z * z)


def _hyper_prior_logdensity(hp: Hyperparams, priors: HyperPriors, gaussian: bool) -> float:
    val = log_prior_lognormal(hp.sigma2, priors.sigma2_logmean, priors.sigma2_logsd)
    if gaussian:
        val += log_prior_lognormal(hp.noise_var, priors.noise_logmean, priors.noise_logsd)
    return val + log_prior_ell2(hp.ell2, priors.tau)


def log_joint(y, f, hp: Hyperparams, priors: HyperPriors, C: CovMatrix,
              fam: LikelihoodFamily) -> float:
    """Log joint density of (y, f, hyperparameters), up to the latent 2pi constant.

    log p(y|f) - log|C|/2 - f' C^-1 f / 2 + hyper-prior terms. For a Gaussian
    family the noise variance is taken from ``hp`` so there is a single
    source of truth for it.
    """
    fv = np.asarray(f, dtype=float).ravel()
    gaussian = isinstance(fam, GaussianIdentity)
    if gaussian:
        fam = GaussianIdentity(hp.noise_var)
    ll = log_lik(y, fv, fam)
    sol, logdet = chol_solve_logdet(C, fv)
    return ll - 0.5 * logdet - 0.5 * float(fv @ sol) + _hyper_prior_logdensity(hp, priors, gaussian)


def gaussian_log_marginal(y, hp: Hyperparams, priors: HyperPriors, C: CovMatrix) -> float:
    """Exact log marginal likelihood log N(y; 0, C + noise_var I) plus hyper-priors."""
    yv = np.asarray(y, dtype=float).ravel()
    if hp.noise_var is None:
        raise NonPositiveVariance("Gaussian marginal requires hp.noise_var")
    V = C.values + hp.noise_var * np.eye(C.n)
    Ct = CovMatrix(values=V, jitter=C.jitter, sigma2=C.sigma2)
    alpha, logdet = chol_solve_logdet(Ct, yv)
    n = yv.size
    val = -0.5 * n * np.log(2.0 * np.pi) - 0.5 * logdet - 0.5 * float(yv @ alpha)
    return val + _hyper_prior_logdensity(hp, priors, gaussian=True)


@dataclass(frozen=True)
class NewtonState:
    """Converged latent mode and the pieces reused by gradients/prediction.

    ``a`` is C^-1 f_hat maintained implicitly (never via an inverse of C);
    ``psi`` is the penalized log-likelihood log p(y|f_hat) - f_hat' a / 2.
    ``psi_path`` records the objective after every accepted step.
    """

    f: np.ndarray
    a: np.ndarray
    psi: float
    logp: float
    grad_lik: np.ndarray
    W: np.ndarray
    d3: np.ndarray
    sqrt_w: np.ndarray
    chol_b: np.ndarray
    iters: int
    psi_path: tuple


def newton_latent_mode(y, C_values: np.ndarray, fam: LikelihoodFamily,
                       f0: np.ndarray | None = None,
                       a0: np.ndarray | None = None) -> NewtonState:
    """Find the mode of log p(y|f) - f' C^-1 f / 2 by damped Newton iteration.

    Uses the B = I + sqrt(W) C sqrt(W) formulation so C itself is never
    factorized; the step is damped by halving until the objective does not
    decrease. Warm starting requires a consistent (f0, a0) pair with
    f0 = C a0.
    """
    yv = np.asarray(y, dtype=float).ravel()
    n = yv.size
    if f0 is None or a0 is None:
        f = np.zeros(n)
        a = np.zeros(n)
    else:
        f = np.array(f0, dtype=float)
        a = np.array(a0, dtype=float)
    logp, g, w, _ = _lik_terms(yv, f, fam)
    psi = logp - 0.5 * float(a @ f)
    path = [psi]
    converged = False
    it = 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        sw = np.sqrt(w)
        B = C_values * np.outer(sw, sw)
        B[np.diag_indices(n)] += 1.0
        L = np.linalg.cholesky(B)
        b = w * f + g
        cb = C_values @ b
        t = solve_triangular(L, sw * cb, lower=True, check_finite=False)
        t = solve_triangular(L.T, t, lower=False, check_finite=False)
        a_new = b - sw * t
        f_new = C_values @ a_new
        # damped step: (f, a) stay linear in the step size, so the quadratic
        # penalty needs no extra solves during the search
        step = 1.0
        accepted = None
        while step > 1e-12:
            a_s = (1.0 - step) * a + step * a_new
            f_s = (1.0 - step) * f + step * f_new
            logp_s, g_s, w_s, _ = _lik_terms(yv, f_s, fam)
            psi_s = logp_s - 0.5 * float(a_s @ f_s)
            if psi_s >= psi - 1e-12 * (1.0 + abs(psi)):
                accepted = (f_s, a_s, logp_s, g_s, w_s, psi_s)
                break
            step *= 0.5
        if accepted is None:
            converged = float(np.max(np.abs(g - a))) <= NEWTON_TOL_GRAD
            break
        f, a, logp, g, w, psi_new = accepted
        path.append(psi_new)
        obj_small = abs(psi_new - psi) <= NEWTON_TOL_OBJ * (1.0 + abs(psi_new))
        grad_small = float(np.max(np.abs(g - a))) <= NEWTON_TOL_GRAD
        psi = psi_new
        if obj_small or grad_small:
            converged = True
            break
    if not converged:
        raise NewtonDivergence(f"latent mode search did not converge in {NEWTON_MAX_ITER} iterations")
    logp, g, w, d3 = _lik_terms(yv, f, fam)
    sw = np.sqrt(w)
    B = C_values * np.outer(sw, sw)
    B[np.diag_indices(n)] += 1.0
    L = np.linalg.cholesky(B)
    return NewtonState(f=f, a=a, psi=psi, logp=logp, grad_lik=g, W=w, d3=d3,
                       sqrt_w=sw, chol_b=L, iters=it, psi_path=tuple(path))


def laplace_objective(y, hp: Hyperparams, priors: HyperPriors, C: CovMatrix,
                      fam: LikelihoodFamily):
    """Laplace-approximate log marginal likelihood for a non-Gaussian family.

    Returns (value, f_hat, W): value is
    log p(y|f_hat) - f_hat' C^-1 f_hat / 2 - log|I + sqrt(W) C sqrt(W)| / 2
    plus the hyper-prior log densities; W is the negated likelihood
    curvature diag(-d2 log p / df2) at the mode.
    """
    if isinstance(fam, GaussianIdentity):
        raise DomainMismatch("Laplace objective is for non-Gaussian families")
    yv = validate_response(y, fam)
    state = newton_latent_mode(yv, C.values, fam)
    half_logdet_b = float(np.sum(np.log(np.diag(state.chol_b))))
    value = state.psi - half_logdet_b + _hyper_prior_logdensity(hp, priors, gaussian=False)
    return value, state.f, state.W


__all__ = [
    "GaussianIdentity",
    "BernoulliLogit",
    "PoissonLog",
    "LikelihoodFamily",
    "HyperPriors",
    "Hyperparams",
    "NewtonState",
    "validate_response",
    "log_lik",
    "log_prior_ell2",
    "log_prior_lognormal",
    "log_joint",
    "gaussian_log_marginal",
    "newton_latent_mode",
    "laplace_objective",
]

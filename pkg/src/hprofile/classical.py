"""Fixed-effects (HCFA-style) profiling methods."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln, log_expit, logsumexp
from scipy.stats import beta as beta_dist

from .errors import DegenerateInput, InputError, RankDeficient, Separation, ZeroVariance
from .registry import COVARIATES, Cohort

SEPARATION_BOUND = 15.0
MAX_ITERATIONS = 50
MAX_HALVINGS = 10
GRADIENT_TOL = 1e-8


@dataclass(frozen=True)
class FixedFit:
    """Logistic MLE. ``active`` marks estimated slopes; inactive ones are
    fixed at zero because their covariate does not vary in the data."""

    intercept: float
    slopes: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    active: np.ndarray

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.slopes])

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + X @ self.slopes

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _loglik(eta, y):
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def newton_logistic(A: np.ndarray, y: np.ndarray, ridge: float = 0.0, start=None, check_separation=True):
    """Damped Newton iteration for logistic regression with design ``A``.

    ``ridge`` adds a Gaussian penalty on every column but the first.
    Returns ``(coef, covariance, converged, iterations, loglik)``.
    """
    n, m = A.shape
    penalty = np.full(m, ridge)
    penalty[0] = 0.0
    if start is None:
        coef = np.zeros(m)
        ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        coef[0] = math.log(ybar / (1 - ybar))
    else:
        coef = np.asarray(start, dtype=float).copy()

    def objective(c):
        return _loglik(A @ c, y) - 0.5 * float(penalty @ c**2)

    current = objective(coef)
    converged = False
    iterations = 0
    while True:
        p = expit(A @ coef)
        grad = A.T @ (y - p) - penalty * coef
        if np.max(np.abs(grad)) <= GRADIENT_TOL:
            converged = True
            break
        if iterations == MAX_ITERATIONS:
            break
        H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(penalty)
        step = np.linalg.solve(H, grad)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = coef + t * step
            value = objective(trial)
            if value >= current - 1e-12 * abs(current):
                break
            t *= 0.5
        coef, current = trial, value
        iterations += 1
        if check_separation and np.max(np.abs(coef)) > SEPARATION_BOUND:
            raise Separation(
                f"coefficient magnitude {np.max(np.abs(coef)):.1f} exceeds {SEPARATION_BOUND}; "
                "a covariate pattern perfectly predicts the outcome"
            )
    p = expit(A @ coef)
    H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(penalty)
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return coef, cov, converged, iterations, _loglik(A @ coef, y)


def fit_logistic_mle(cohort: Cohort, ridge: float = 0.0, check_separation: bool = True) -> FixedFit:
    """Maximum-likelihood fit of the common-intercept logistic risk model.

    Covariates that are constant in the cohort are not estimable and are held
    at zero (reported through ``FixedFit.active``).
    """
    y = cohort.death.astype(float)
    deaths = int(y.sum())
    if check_separation and (deaths == 0 or deaths == len(y)):
        raise Separation("outcome does not vary: need at least one death and one survivor")
    X = cohort.X
    active = np.ptp(X, axis=0) > 0
    A = np.column_stack([np.ones(len(y)), X[:, active]])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise RankDeficient("design matrix is rank deficient")
    coef, cov_a, converged, it, ll = newton_logistic(A, y, ridge=ridge, check_separation=check_separation)
    slopes = np.zeros(X.shape[1])
    slopes[active] = coef[1:]
    idx = np.concatenate([[0], 1 + np.flatnonzero(active)])
    cov = np.zeros((X.shape[1] + 1,) * 2)
    cov[np.ix_(idx, idx)] = cov_a
    return FixedFit(float(coef[0]), slopes, cov, converged, it, ll, active)


def expected_rate_fixed(fit: FixedFit, cohort: Cohort) -> np.ndarray:
    """Mean fitted risk per hospital (in hospital order)."""
    p = expit(fit.linear_predictor(cohort.X))
    return np.bincount(cohort.hospital, weights=p, minlength=cohort.n_hospitals) / cohort.volumes()


@dataclass(frozen=True)
class ZReport:
    hospital_ids: tuple
    n: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    z: np.ndarray
    flag: np.ndarray
    threshold: float

    def rows(self):
        for i, h in enumerate(self.hospital_ids):
            yield {
                "hospital_id": h,
                "n": int(self.n[i]),
                "observed": float(self.observed[i]),
                "expected": float(self.expected[i]),
                "statistic": float(self.z[i]),
                "lower": "",
                "upper": "",
                "flag": int(self.flag[i]),
            }


def z_outliers(
    fit: FixedFit, cohort: Cohort, threshold: float = 1.645, propagate_coef_uncertainty: bool = False
) -> ZReport:
    """Standardised difference between observed and expected hospital rates.

    The variance of the difference is ``sum_j p_ij (1 - p_ij) / n_i**2``. With
    ``propagate_coef_uncertainty`` the delta-method term ``g' Cov g`` for the
    expected rate is added, ``g`` being its gradient in the coefficients.
    Flags are one-sided: ``z > threshold``.
    """
    p = expit(fit.linear_predictor(cohort.X))
    n = cohort.volumes()
    observed = cohort.deaths_by_hospital() / n
    expected = np.bincount(cohort.hospital, weights=p, minlength=cohort.n_hospitals) / n
    w = p * (1 - p)
    var = np.bincount(cohort.hospital, weights=w, minlength=cohort.n_hospitals) / n**2
    if propagate_coef_uncertainty:
        A = np.column_stack([np.ones(cohort.n_patients), cohort.X])
        G = np.zeros((cohort.n_hospitals, A.shape[1]))
        np.add.at(G, cohort.hospital, A * w[:, None])
        G /= n[:, None]
        var = var + np.einsum("ij,jk,ik->i", G, fit.covariance, G)
    if np.any(var <= 0):
        bad = cohort.hospital_ids[int(np.argmax(var <= 0))]
        raise ZeroVariance(f"hospital {bad!r}: fitted risks are all 0 or 1")
    z = (observed - expected) / np.sqrt(var)
    return ZReport(cohort.hospital_ids, n, observed, expected, z, z > threshold, threshold)


def clopper_pearson(k, n, alpha: float = 0.05):
    """Exact two-sided binomial interval for ``k`` events in ``n`` trials."""
    k = np.asarray(k)
    n = np.asarray(n)
    lower = np.where(k == 0, 0.0, beta_dist.ppf(alpha / 2, np.maximum(k, 1), n - k + 1))
    upper = np.where(k == n, 1.0, beta_dist.ppf(1 - alpha / 2, k + 1, np.maximum(n - k, 1)))
    return lower, upper


@dataclass(frozen=True)
class OEReport:
    hospital_ids: tuple
    n: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    rate_pct: np.ndarray
    lower_pct: np.ndarray
    upper_pct: np.ndarray
    flag: np.ndarray
    pooled_pct: float

    def rows(self):
        for i, h in enumerate(self.hospital_ids):
            yield {
                "hospital_id": h,
                "n": int(self.n[i]),
                "observed": float(self.observed[i]),
                "expected": float(self.expected[i]),
                "statistic": float(self.rate_pct[i]),
                "lower": float(self.lower_pct[i]),
                "upper": float(self.upper_pct[i]),
                "flag": int(self.flag[i]),
            }


def oe_standardized(fit: FixedFit, cohort: Cohort, expected=None) -> OEReport:
    """Indirectly standardised rates ``(observed / expected) * pooled`` in percent.

    The 95% interval is Clopper-Pearson on the death count, scaled by
    ``pooled / expected``; a hospital is flagged when it excludes the pooled rate.
    """
    n = cohort.volumes()
    deaths = cohort.deaths_by_hospital()
    observed = deaths / n
    if expected is None:
        expected = expected_rate_fixed(fit, cohort)
    expected = np.asarray(expected, dtype=float)
    if np.any(expected <= 0):
        raise InputError("expected rates must be positive")
    pooled = cohort.pooled_rate()
    lo, hi = clopper_pearson(deaths, n)
    scale = 100.0 * pooled / expected
    rate = observed * scale
    lower, upper = lo * scale, hi * scale
    flag = (100.0 * pooled < lower) | (100.0 * pooled > upper)
    return OEReport(cohort.hospital_ids, n, observed, expected, rate, lower, upper, flag, 100.0 * pooled)


@dataclass(frozen=True)
class VariationIndices:
    extremal_quotient: float
    eq_infinite: bool
    coefficient_of_variation: float
    systematic_component: float


def variation_indices(rates, volumes) -> VariationIndices:
    """Small-area variation indices for per-institution rates (proportions).

    Variances use the sample (n - 1) divisor. The extremal quotient is
    ``inf`` with ``eq_infinite`` set when the smallest rate is zero.
    """
    rates = np.asarray(rates, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    if rates.ndim != 1 or len(rates) < 2 or rates.shape != volumes.shape:
        raise InputError("need at least two institutions with matching volumes")
    if np.any(volumes < 1):
        raise InputError("volumes must be >= 1")
    if np.all(rates == 0):
        raise DegenerateInput("all rates are zero")
    lo, hi = rates.min(), rates.max()
    infinite = lo == 0
    eq = math.inf if infinite else float(hi / lo)
    total_var = float(np.var(rates, ddof=1))
    cv = math.sqrt(total_var) / float(rates.mean())
    within = float(np.mean(rates * (1 - rates) / volumes))
    return VariationIndices(eq, bool(infinite), cv, max(0.0, total_var - within))


@dataclass(frozen=True)
class BinomialProbabilities:
    point: float
    upper_tail: float
    lower_tail: float


def binomial_point_and_tail(n: int, p: float, k: int) -> BinomialProbabilities:
    """``P(X = k)``, ``P(X >= k)`` and ``P(X <= k)`` for ``X ~ Bin(n, p)``, in log space."""
    if not 0 <= k <= n:
        raise InputError("need 0 <= k <= n")
    if not 0.0 <= p <= 1.0:
        raise InputError("need 0 <= p <= 1")
    if p in (0.0, 1.0):
        mode = 0 if p == 0.0 else n
        point = float(k == mode)
        return BinomialProbabilities(point, float(mode >= k), float(mode <= k))
    j = np.arange(n + 1)
    logpmf = gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1) + j * math.log(p) + (n - j) * math.log1p(-p)
    total = logsumexp(logpmf)
    logpmf = logpmf - total
    point = math.exp(logpmf[k])
    upper = min(1.0, math.exp(logsumexp(logpmf[k:])))
    lower = min(1.0, math.exp(logsumexp(logpmf[: k + 1])))
    return BinomialProbabilities(point, upper, lower)


TABLE_COLUMNS = ("hospital_id", "n", "observed", "expected", "statistic", "lower", "upper", "flag")


def write_table(report, path) -> None:
    """Export a :class:`ZReport` or :class:`OEReport` as CSV."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in report.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def coefficient_table(fit: FixedFit) -> list[dict]:
    se = fit.standard_errors()
    names = ("intercept",) + COVARIATES
    return [
        {"term": name, "estimate": float(b), "se": float(s), "odds_ratio": math.exp(b)}
        for name, b, s in zip(names, fit.params, se)
    ]

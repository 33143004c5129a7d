"""Hierarchical random-intercept logistic model: priors, elicitation, log posterior.

``log_posterior`` is a density over ``(mu, tau2, beta1, beta0)``; priors on
the between-hospital spread that are stated for the precision or for the
standard deviation are converted to densities on ``tau2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import gammaln, log_expit
from scipy.stats import norm

from .errors import BadRange, InputError
from .registry import COVARIATES, N_COVARIATES, Cohort

LOG_2PI = math.log(2 * math.pi)
PAIRWISE_MEDIAN_ROUNDED = 1.09


class PriorKind(str, Enum):
    GAMMA_ON_PRECISION = "gamma_on_precision"
    UNIFORM_ON_SD = "uniform_on_sd"
    HALF_NORMAL_ON_SD = "half_normal_on_sd"
    FIXED = "fixed"


@dataclass(frozen=True)
class PriorSpec:
    """Prior for the between-hospital standard deviation ``tau``.

    Use the constructors: ``gamma(shape, rate)`` on ``1 / tau**2``,
    ``uniform(lo, hi)`` on ``tau``, ``half_normal(variance)`` on ``tau`` (the
    parameter is the variance of the underlying normal) and ``fixed(tau)``.
    """

    kind: PriorKind
    shape: float | None = None
    rate: float | None = None
    lo: float | None = None
    hi: float | None = None
    variance: float | None = None
    tau: float | None = None

    def __post_init__(self):
        k = self.kind
        ok = {
            PriorKind.GAMMA_ON_PRECISION: lambda: self.shape > 0 and self.rate > 0,
            PriorKind.UNIFORM_ON_SD: lambda: 0 <= self.lo < self.hi,
            PriorKind.HALF_NORMAL_ON_SD: lambda: self.variance > 0,
            PriorKind.FIXED: lambda: self.tau >= 0,
        }[k]
        try:
            valid = ok()
        except TypeError:
            valid = False
        if not valid:
            raise InputError(f"invalid parameters for {k.value} prior")

    @classmethod
    def gamma(cls, shape=0.001, rate=0.001):
        return cls(PriorKind.GAMMA_ON_PRECISION, shape=float(shape), rate=float(rate))

    @classmethod
    def uniform(cls, lo=0.0, hi=1.5):
        return cls(PriorKind.UNIFORM_ON_SD, lo=float(lo), hi=float(hi))

    @classmethod
    def half_normal(cls, variance=0.26):
        return cls(PriorKind.HALF_NORMAL_ON_SD, variance=float(variance))

    @classmethod
    def fixed(cls, tau):
        return cls(PriorKind.FIXED, tau=float(tau))

    @property
    def is_fixed(self) -> bool:
        return self.kind is PriorKind.FIXED

    def label(self) -> str:
        if self.kind is PriorKind.GAMMA_ON_PRECISION:
            return f"tau^-2 ~ Gamma({self.shape:g}, {self.rate:g})"
        if self.kind is PriorKind.UNIFORM_ON_SD:
            return f"tau ~ Unif({self.lo:g}, {self.hi:g})"
        if self.kind is PriorKind.HALF_NORMAL_ON_SD:
            return f"tau ~ half-Normal({self.variance:.4g})"
        return f"tau = {self.tau:g} (fixed)"

    def to_json(self) -> dict:
        out = {"kind": self.kind.value}
        for name in ("shape", "rate", "lo", "hi", "variance", "tau"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PriorSpec":
        try:
            kind = PriorKind(obj["kind"])
        except (KeyError, ValueError):
            raise InputError(f"prior: unknown or missing kind in {obj!r}") from None
        fields = {k: float(v) for k, v in obj.items() if k != "kind"}
        try:
            return cls(kind, **fields)
        except TypeError:
            raise InputError(f"prior: unexpected field in {obj!r}") from None

    def log_density_tau2(self, tau2: float) -> float:
        """Log prior density of ``tau2`` (zero for a fixed prior)."""
        if self.is_fixed:
            return 0.0
        if not tau2 > 0:
            return -math.inf
        if self.kind is PriorKind.GAMMA_ON_PRECISION:
            a, b = self.shape, self.rate
            phi = 1.0 / tau2
            return a * math.log(b) - gammaln(a) + (a + 1) * math.log(phi) - b * phi
        tau = math.sqrt(tau2)
        if self.kind is PriorKind.UNIFORM_ON_SD:
            if not self.lo <= tau <= self.hi:
                return -math.inf
            return -math.log(self.hi - self.lo) - math.log(2 * tau)
        v = self.variance
        return -0.5 * math.log(2 * math.pi * v) - tau2 / (2 * v) - 0.5 * math.log(tau2)

    def dlog_density_dtau2(self, tau2: float) -> float:
        if self.is_fixed:
            return 0.0
        if self.kind is PriorKind.GAMMA_ON_PRECISION:
            phi = 1.0 / tau2
            return -(self.shape + 1) * phi + self.rate * phi**2
        if self.kind is PriorKind.UNIFORM_ON_SD:
            return -0.5 / tau2
        return -0.5 / self.variance - 0.5 / tau2


SHIPPED_PRIORS = (PriorSpec.gamma(0.001, 0.001), PriorSpec.uniform(0.0, 1.5), PriorSpec.half_normal(0.26))


@dataclass(frozen=True)
class HierSpec:
    """Random-intercept logistic model with vague normal priors on ``mu`` and ``beta1``."""

    tau_prior: PriorSpec = field(default_factory=PriorSpec.gamma)
    mu_prior_var: float = 1000.0
    beta_prior_var: float = 1000.0
    covariates: tuple = COVARIATES

    def __post_init__(self):
        if not (self.mu_prior_var > 0 and self.beta_prior_var > 0):
            raise InputError("prior variances must be positive")

    @property
    def fixed_tau(self) -> float | None:
        return self.tau_prior.tau if self.tau_prior.is_fixed else None

    def to_json(self, seed: int | None = None) -> dict:
        out = {
            "tau_prior": self.tau_prior.to_json(),
            "mu_prior_var": self.mu_prior_var,
            "beta_prior_var": self.beta_prior_var,
        }
        if seed is not None:
            out["seed"] = int(seed)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "HierSpec":
        prior = PriorSpec.from_json(obj.get("tau_prior", {"kind": "gamma_on_precision", "shape": 0.001, "rate": 0.001}))
        return cls(
            prior,
            float(obj.get("mu_prior_var", 1000.0)),
            float(obj.get("beta_prior_var", 1000.0)),
        )

    def dumps(self, seed: int | None = None) -> str:
        return json.dumps(self.to_json(seed), sort_keys=True)


@dataclass(frozen=True)
class HierParams:
    mu: float
    tau2: float
    beta1: np.ndarray
    beta0: np.ndarray

    def __post_init__(self):
        if len(self.beta1) != N_COVARIATES:
            raise InputError(f"beta1 must have length {N_COVARIATES}")

    def flat(self) -> np.ndarray:
        return np.concatenate([[self.mu, self.tau2], self.beta1, self.beta0])

    @classmethod
    def from_flat(cls, v, n_hospitals):
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), v[2 : 2 + N_COVARIATES].copy(), v[2 + N_COVARIATES :].copy())


def _normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _intercepts(params: HierParams, spec: HierSpec, n_hospitals: int) -> tuple[np.ndarray, float]:
    tau = spec.fixed_tau
    tau2 = params.tau2 if tau is None else tau * tau
    if tau == 0.0:
        return np.full(n_hospitals, params.mu), 0.0
    return np.asarray(params.beta0, dtype=float), tau2


def log_posterior_arrays(params: HierParams, spec: HierSpec, X, y, hospital, n_hospitals: int) -> float:
    """Unnormalised log posterior from raw arrays (rows may be empty)."""
    beta0, tau2 = _intercepts(params, spec, n_hospitals)
    if not spec.tau_prior.is_fixed and not tau2 > 0:
        return -math.inf
    logp = float(np.sum(_normal_logpdf(params.mu, 0.0, spec.mu_prior_var)))
    logp += float(np.sum(_normal_logpdf(params.beta1, 0.0, spec.beta_prior_var)))
    if spec.fixed_tau != 0.0:
        logp += float(np.sum(_normal_logpdf(beta0, params.mu, tau2)))
    logp += spec.tau_prior.log_density_tau2(tau2)
    if len(y):
        eta = beta0[hospital] + X @ params.beta1
        logp += float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))
    return logp


def log_posterior(params: HierParams, spec: HierSpec, cohort: Cohort) -> float:
    return log_posterior_arrays(params, spec, cohort.X, cohort.death, cohort.hospital, cohort.n_hospitals)


def log_posterior_grad(params: HierParams, spec: HierSpec, cohort: Cohort) -> HierParams:
    """Gradient of :func:`log_posterior`, returned in the shape of the parameters.

    Components that are not free under ``spec`` (``tau2`` for a fixed prior,
    ``beta0`` when ``tau`` is fixed at zero) are reported as zero.
    """
    I = cohort.n_hospitals
    beta0, tau2 = _intercepts(params, spec, I)
    eta = beta0[cohort.hospital] + cohort.X @ params.beta1
    resid = cohort.death - 1.0 / (1.0 + np.exp(-eta))
    g_beta1 = cohort.X.T @ resid - params.beta1 / spec.beta_prior_var
    g_mu = -params.mu / spec.mu_prior_var
    if spec.fixed_tau == 0.0:
        return HierParams(g_mu + float(resid.sum()), 0.0, g_beta1, np.zeros(I))
    dev = beta0 - params.mu
    g_beta0 = np.bincount(cohort.hospital, weights=resid, minlength=I) - dev / tau2
    g_mu += float(dev.sum() / tau2)
    g_tau2 = 0.0
    if not spec.tau_prior.is_fixed:
        g_tau2 = float(np.sum(-0.5 / tau2 + dev**2 / (2 * tau2**2))) + spec.tau_prior.dlog_density_dtau2(tau2)
    return HierParams(g_mu, g_tau2, g_beta1, g_beta0)


# ---------------------------------------------------------------- elicitation

ODDS_RANGE_FACTOR = 3.92


def elicit_tau_from_odds_range(a: float) -> float:
    """Spread ``tau`` such that the 97.5%/2.5% odds ratio across hospitals is ``a``."""
    if not a > 1:
        raise BadRange(f"odds-ratio range must exceed 1, got {a}")
    return math.log(a) / ODDS_RANGE_FACTOR


def elicit_half_normal_from_upper(tau_95: float, z: float | None = None) -> PriorSpec:
    """Half-normal prior on ``tau`` whose 95th percentile is ``tau_95``.

    The variance is ``(tau_95 / z)**2`` with ``z`` the 97.5% normal quantile;
    pass ``z=1.96`` for the rounded constant.
    """
    if not tau_95 > 0:
        raise BadRange("tau_95 must be positive")
    z = norm.ppf(0.975) if z is None else z
    return PriorSpec.half_normal((tau_95 / z) ** 2)


def half_normal_quantile(q: float, variance: float) -> float:
    return math.sqrt(variance) * norm.ppf(0.5 + q / 2)


def pairwise_diff_median(tau: float, rounded: bool = False) -> float:
    """Median of ``|b_i - b_j|`` for two independent N(mu, tau^2) intercepts.

    The exact value is ``sqrt(2) * Phi^-1(0.75) * tau`` (about 0.954 tau);
    ``rounded`` returns ``1.09 * tau`` instead.
    """
    if tau < 0:
        raise BadRange("tau must be nonnegative")
    if rounded:
        return PAIRWISE_MEDIAN_ROUNDED * tau
    return math.sqrt(2.0) * norm.ppf(0.75) * tau

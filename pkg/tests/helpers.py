"""Data generators shared by the test modules."""

import numpy as np
from scipy.special import expit

from hprofile.registry import Cohort, CovariateModel, load_coefficients, load_targets


def simulate_hierarchical(n_hospitals, volume, mu, tau, seed, coef=None):
    """Cohort drawn from the random-intercept model with shipped covariate prevalences.

    Returns the cohort and the true hospital intercepts.
    """
    rng = np.random.default_rng(seed)
    if coef is None:
        _, coef = load_coefficients()
    model = CovariateModel(load_targets().prevalence_pct, coef)
    N = n_hospitals * volume
    X = model.design(0.0, rng.standard_normal(N), rng.random((N, model.n_uniforms())))
    hosp = np.repeat(np.arange(n_hospitals), volume)
    beta0 = mu + tau * rng.standard_normal(n_hospitals)
    y = (rng.random(N) < expit(beta0[hosp] + X @ np.asarray(coef))).astype(np.int64)
    ids = tuple(str(i + 1) for i in range(n_hospitals))
    return Cohort(ids, hosp, y, X), beta0


def point_draws(cohort, mu, beta1, beta0, tau2=0.01, keep=3):
    """Posterior draws with all mass at one parameter point (one chain)."""
    from hprofile.registry import COVARIATES
    from hprofile.sampler import ChainConfig, PosteriorDraws

    I = cohort.n_hospitals
    beta1 = np.broadcast_to(np.asarray(beta1, float), (len(COVARIATES),))
    beta0 = np.broadcast_to(np.asarray(beta0, float), (I,))
    samples = {
        "mu": np.full((keep, 1), float(mu)),
        "tau2": np.full((keep, 1), float(tau2)),
        "beta1": np.tile(beta1, (keep, 1, 1)),
        "beta0": np.tile(beta0, (keep, 1, 1)),
    }
    labels = {"beta1": COVARIATES, "beta0": cohort.hospital_ids}
    return PosteriorDraws(samples, labels, {}, ChainConfig(0, keep, chains=1))


def random_cohort(n_hospitals, volume, seed, rate=0.1):
    """Small cohort with random binary covariates and Bernoulli outcomes."""
    from hprofile.registry import N_COVARIATES

    rng = np.random.default_rng(seed)
    N = n_hospitals * volume
    X = np.zeros((N, N_COVARIATES))
    X[:, 0] = np.maximum(0.0, rng.normal(1.5, 4.0, N))
    X[:, 1:9] = rng.random((N, 8)) < 0.3
    y = (rng.random(N) < rate).astype(np.int64)
    hosp = np.repeat(np.arange(n_hospitals), volume)
    return Cohort(tuple(str(i + 1) for i in range(n_hospitals)), hosp, y, X)

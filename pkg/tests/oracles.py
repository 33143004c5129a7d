"""Independent reference computations used to freeze expected values."""

import itertools
import math

import numpy as np
from scipy.stats import norm

BINARY = ("male", "renal_failure", "diabetes", "hypertension", "pvd", "prior_pci", "shock", "iabp")
EF = ("ge40", "lt30_or_missing", "b30to39")
MI = ("none", "le6h", "h7to24", "d1to7", "d8to21", "gt21d")
STATUS = ("elective", "urgent", "emergent")


def population_rate(prev, intercept, coef, age_sd=4.0, age_max=30.0, grid=4001):
    """E[expit(intercept + coef'x)] over independent factors, by enumeration.

    ``coef`` is indexed by name. Age is clip(Normal(mean, sd), 0, max): point
    masses at both clip bounds plus trapezoid quadrature in between.
    """
    lp, w = [0.0], [1.0]
    for name in BINARY:
        p = prev[name] / 100.0
        lp = [a + b for a in lp for b in (0.0, coef[name])]
        w = [a * b for a in w for b in (1 - p, p)]
    for group, levels, prefix in (("ef_cat", EF, "ef"), ("mi_cat", MI, "mi"), ("status", STATUS, "status")):
        probs = np.array([prev[group][lv] for lv in levels], float)
        probs /= probs.sum()
        cs = [0.0] + [coef[f"{prefix}_{lv}"] for lv in levels[1:]]
        lp = [a + b for a in lp for b in cs]
        w = [a * b for a in w for b in probs]
    lp, w = np.array(lp), np.array(w)

    mean = prev["yrs_over_65"]
    ages = np.linspace(0.0, age_max, grid)
    dens = norm.pdf(ages, mean, age_sd)
    trap = np.full(grid, ages[1] - ages[0])
    trap[0] = trap[-1] = trap[0] / 2
    age_w = dens * trap
    age_w[0] += norm.cdf(0.0, mean, age_sd)
    age_w[-1] += norm.sf(age_max, mean, age_sd)
    eta = intercept + lp[:, None] + coef["yrs_over_65"] * ages[None, :]
    return float(w @ (1.0 / (1.0 + np.exp(-eta))) @ age_w)


def binom_pmf_direct(n, p, k):
    return math.comb(n, k) * p**k * (1 - p) ** (n - k)


def clopper_pearson_bisect(k, n, alpha=0.05):
    """Exact interval by bisection on binomial tail sums."""
    def cdf(x, p):
        return sum(binom_pmf_direct(n, p, j) for j in range(x + 1))

    def solve(f, lo=0.0, hi=1.0):
        for _ in range(200):
            mid = (lo + hi) / 2
            if f(mid) > 0:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2

    # P(X >= k | p) increases in p, P(X <= k | p) decreases
    lower = 0.0 if k == 0 else solve(lambda p: alpha / 2 - (1 - cdf(k - 1, p)))
    upper = 1.0 if k == n else solve(lambda p: cdf(k, p) - alpha / 2)
    return lower, upper


def newton_logistic_oracle(A, y, tol=1e-12, max_iter=100):
    """Plain iteratively reweighted least squares, no damping or safeguards."""
    beta = np.zeros(A.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(A @ beta)))
        W = p * (1 - p)
        z = A @ beta + (y - p) / W
        new = np.linalg.lstsq(A * np.sqrt(W)[:, None], z * np.sqrt(W), rcond=None)[0]
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def normal_random_intercept_mu_posterior(deaths, volumes, tau, mu_var=1000.0, grid=None, nodes=80):
    """Posterior mean and sd of mu in the intercept-only model with known tau.

    Each hospital's marginal likelihood integrates the binomial likelihood
    against N(mu, tau^2) by Gauss-Hermite quadrature; mu is then handled on a
    dense grid. No normal approximation is involved.
    """
    from scipy.special import log_expit

    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    if grid is None:
        rate = deaths.sum() / volumes.sum()
        c = math.log(rate / (1 - rate))
        grid = np.linspace(c - 3, c + 3, 6001)
    logpost = -0.5 * grid**2 / mu_var
    for d, n in zip(deaths, volumes):
        b = grid[:, None] + tau * x[None, :]
        ll = d * log_expit(b) + (n - d) * log_expit(-b)
        m = ll.max(axis=1, keepdims=True)
        logpost += (m[:, 0] + np.log(np.exp(ll - m) @ w))
    post = np.exp(logpost - logpost.max())
    post /= np.trapezoid(post, grid)
    mean = np.trapezoid(grid * post, grid)
    sd = math.sqrt(np.trapezoid((grid - mean) ** 2 * post, grid))
    return mean, sd

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import expit, logit

sys.path.insert(0, str(Path(__file__).parent))

from hprofile.hiermodel import HierSpec, PriorSpec  # noqa: E402
from hprofile.profiling import (  # noqa: E402
    expected_rate_hier,
    ppp_crossval,
    ppp_fixed_tau,
    ppp_replication,
    risk_standardized_rate,
)
from hprofile.registry import massachusetts_cohort  # noqa: E402
from hprofile.sampler import ChainConfig, mcse, sample_hier  # noqa: E402

# ---------------------------------------------------------------- criterion report

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


# ---------------------------------------------------------------- shared fits

N_RUNS = 20
RUN_CONFIG = ChainConfig(burn_in=1000, keep=1000, chains=2)
SHIPPED = {
    "gamma": PriorSpec.gamma(0.001, 0.001),
    "uniform": PriorSpec.uniform(0.0, 1.5),
    "half_normal": PriorSpec.half_normal(0.26),
}
H3, H5, H9, H12, H13 = (2, 4, 8, 11, 12)  # indices of hospitals "3", "5", "9", "12", "13"


def crude_offsets(draws, cohort):
    """Continuity-corrected crude log-odds offset of each hospital.

    The offset ``d`` solves ``sum_j expit(mu + x_j' beta1 + d) = (deaths + 0.5) * n / (n + 1)``
    at the posterior-mean ``mu`` and ``beta1``; it is the hospital's own
    unshrunk log-odds departure from a typical hospital.
    """
    mu = draws.pooled("mu").mean()
    beta1 = draws.pooled("beta1").mean(axis=0)
    out = np.empty(cohort.n_hospitals)
    deaths, n = cohort.deaths_by_hospital(), cohort.volumes()
    for i in range(cohort.n_hospitals):
        base = mu + cohort.X[cohort.rows_of(i)] @ beta1
        target = (deaths[i] + 0.5) * n[i] / (n[i] + 1.0)
        out[i] = brentq(lambda d: expit(base + d).sum() - target, -20, 20)
    return out


# the adjusted offset is a plug-in at posterior means; below this size its sign is not determined
ADJUSTED_OFFSET_FLOOR = 0.10


def shrinkage_check(draws, cohort):
    """Per hospital: (posterior offset, adjusted crude offset, 3 MCSE, literal holds, adjusted holds).

    The literal check compares with the continuity-corrected crude logit of
    the hospital's death rate. The adjusted check replaces it with the
    case-mix-adjusted offset and only applies where that offset is clearly
    nonzero.
    """
    mu = draws.pooled("mu").mean()
    dev = draws["beta0"] - draws["mu"][:, :, None]  # (keep, chains, I)
    post = dev.reshape(-1, dev.shape[2]).mean(axis=0)
    tol = np.array([3 * mcse(dev[:, :, i]) for i in range(dev.shape[2])])
    deaths, n = cohort.deaths_by_hospital(), cohort.volumes()
    crude_logit = logit((deaths + 0.5) / (n + 1.0))
    literal = np.abs(post) <= np.abs(crude_logit - mu) + tol
    crude = crude_offsets(draws, cohort)
    adjusted = (np.abs(crude) < ADJUSTED_OFFSET_FLOOR) | (np.abs(post) <= np.abs(crude) + tol)
    return post, crude, tol, literal, adjusted


@dataclass
class MassRun:
    seed: int
    tau2_mean: dict = field(default_factory=dict)
    mu_mean: dict = field(default_factory=dict)
    converged: dict = field(default_factory=dict)
    p_replication: np.ndarray = None
    p_crossval: np.ndarray = None
    tau2_loo: np.ndarray = None
    fixed001: object = None
    rsr_mean: np.ndarray = None
    rsr_median: np.ndarray = None
    anchor: float = 0.0
    expected_mean: np.ndarray = None
    shrinkage: dict = field(default_factory=dict)  # prior -> holds array
    shrinkage_adjusted: dict = field(default_factory=dict)
    shrinkage_detail: dict = field(default_factory=dict)
    equal_rate: dict = field(default_factory=dict)  # prior -> (|off5|, |off9|, tol, holds)


def _one_run(seed: int) -> MassRun:
    cohort = massachusetts_cohort(seed).cohort
    cfg = RUN_CONFIG.with_seed(seed)
    run = MassRun(seed)
    gamma_draws = None
    for name, prior in SHIPPED.items():
        d = sample_hier(HierSpec(prior), cohort, cfg)
        run.tau2_mean[name] = float(d.pooled("tau2").mean())
        run.mu_mean[name] = float(d.pooled("mu").mean())
        run.converged[name] = d.converged
        post, crude, tol, literal, adjusted = shrinkage_check(d, cohort)
        run.shrinkage[name] = literal
        run.shrinkage_adjusted[name] = adjusted
        run.shrinkage_detail[name] = (post, crude, tol)
        dev = d["beta0"] - d["mu"][:, :, None]
        a5, a9 = abs(post[H5]), abs(post[H9])
        t = 3 * mcse(dev[:, :, H5] - dev[:, :, H9])
        run.equal_rate[name] = (a5, a9, t, a5 <= a9 + t)
        if name == "gamma":
            gamma_draws = d
    spec = HierSpec(SHIPPED["gamma"])
    run.p_replication = ppp_replication(spec, cohort, cfg, draws=gamma_draws).p
    run.anchor = 100.0 * cohort.pooled_rate()
    rsr = risk_standardized_rate(gamma_draws, cohort, run.anchor)
    run.rsr_mean, run.rsr_median = rsr.rate.mean, rsr.rate.median
    run.expected_mean = expected_rate_hier(gamma_draws, cohort).mean
    run.fixed001 = ppp_fixed_tau(HierSpec(PriorSpec.fixed(0.01)), cohort, cfg)
    cv = ppp_crossval(spec, cohort, cfg)
    run.p_crossval = cv.check.p
    run.tau2_loo = cv.tau2_mean
    return run


_RUNS: list[MassRun] = []


@pytest.fixture(scope="session")
def massachusetts_runs() -> list[MassRun]:
    """Twenty seeded analyses of the synthetic Massachusetts cohort (seeds 1..20)."""
    if not _RUNS:
        _RUNS.extend(_one_run(seed) for seed in range(1, N_RUNS + 1))
    return _RUNS


@pytest.fixture(scope="session")
def ma_cohort():
    return massachusetts_cohort(1).cohort


@pytest.fixture(scope="session")
def ma_draws(ma_cohort):
    return sample_hier(HierSpec(), ma_cohort, RUN_CONFIG.with_seed(1))

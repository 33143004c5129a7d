"""Report cards from posterior draws.

Rates are reported in percent. For one posterior draw and hospital ``i`` the
two case-mix sums are

* ``numer_i = sum_j expit(beta0_i + x_ij' beta1)`` (predicted deaths), and
* ``denom_i = sum_j expit(mu + x_ij' beta1)`` (deaths expected at a typical
  hospital for the same patients).

``denom_i / n_i`` is the expected rate and ``numer_i / denom_i`` times an
anchor rate is the risk-standardized rate.

Three posterior predictive p-values flag unusual hospitals. Each is the
share of replicates whose mortality is at least the observed mortality
(ties count as exceedance). Small values point to worse-than-expected outcomes.

* replication: replicate intercepts drawn from ``N(mu, tau^2)`` for each draw;
* fixed tau: the same with ``tau`` held at an in-control value;
* cross-validation: hospital ``i`` is predicted from a fit that excludes it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InputError
from .hiermodel import HierSpec, PriorSpec, elicit_tau_from_odds_range
from .registry import Cohort
from .sampler import ChainConfig, PosteriorDraws, sample_hier
from .sampler.config import REPLICATE_STREAM, stream

EXTREME_CUTS = (0.01, 0.99)
SUSPECT_CUTS = (0.05, 0.95)
PRACTICAL_DIFFERENCE_PP = 1.0
IN_CONTROL_TAU = elicit_tau_from_odds_range(1.48)

# replicate stream tags
_TAG_REPLICATION, _TAG_FIXED, _TAG_CROSSVAL = 0, 1, 2


def _summ(x: np.ndarray) -> dict:
    q = np.percentile(x, [2.5, 50, 97.5], axis=0)
    return {"mean": x.mean(axis=0), "median": q[1], "lo": q[0], "hi": q[2]}


# ---------------------------------------------------------------- case-mix sums


def case_mix_sums(draws: PosteriorDraws, cohort: Cohort, use_mu: bool = False) -> np.ndarray:
    """Per draw and hospital, the sum over patients of the predicted risk.

    With ``use_mu`` every hospital's intercept is replaced by ``mu``.
    Returns a ``(draws, hospitals)`` array.
    """
    beta1 = draws.pooled("beta1")
    b0 = np.broadcast_to(draws.pooled("mu")[:, None], (len(beta1), cohort.n_hospitals)) if use_mu else draws.pooled("beta0")
    out = np.empty((len(beta1), cohort.n_hospitals))
    for i in range(cohort.n_hospitals):
        lin = cohort.X[cohort.rows_of(i)] @ beta1.T  # (n_i, D)
        out[:, i] = expit(lin + b0[:, i]).sum(axis=0)
    return out


@dataclass(frozen=True)
class RateSummary:
    """Per-hospital summaries over draws (percent)."""

    draws: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def of(cls, d: np.ndarray) -> "RateSummary":
        s = _summ(d)
        return cls(d, s["mean"], s["median"], s["lo"], s["hi"])


def expected_rate_hier(draws: PosteriorDraws, cohort: Cohort) -> RateSummary:
    """Expected mortality (%) of each hospital's patients at a typical hospital."""
    return RateSummary.of(100.0 * case_mix_sums(draws, cohort, use_mu=True) / cohort.volumes())


@dataclass(frozen=True)
class StandardizedRates:
    anchor: float
    ratio: RateSummary  # numer / denom
    rate: RateSummary  # ratio * anchor, percent
    numer: np.ndarray
    denom: np.ndarray


def risk_standardized_rate(draws: PosteriorDraws, cohort: Cohort, anchor: float) -> StandardizedRates:
    """Risk-standardized mortality (%) of each hospital, anchored at ``anchor`` percent."""
    if not anchor > 0:
        raise InputError(f"anchor rate must be positive, got {anchor}")
    numer = case_mix_sums(draws, cohort)
    denom = case_mix_sums(draws, cohort, use_mu=True)
    ratio = numer / denom
    return StandardizedRates(float(anchor), RateSummary.of(ratio), RateSummary.of(ratio * anchor), numer, denom)


def excess_deaths(rates: StandardizedRates) -> np.ndarray:
    """(posterior mean ratio - 1) times the posterior mean expected deaths.

    Negative values are additional survivors.
    """
    return (rates.ratio.mean - 1.0) * rates.denom.mean(axis=0)


def scatter_data(draws: PosteriorDraws, cohort: Cohort) -> list[tuple[str, int, float, float]]:
    """Rows ``(hospital_id, draw, expected_pct, predicted_pct)`` for an expected-vs-predicted plot."""
    n = cohort.volumes()
    x = 100.0 * case_mix_sums(draws, cohort, use_mu=True) / n
    y = 100.0 * case_mix_sums(draws, cohort) / n
    return [
        (h, d, float(x[d, i]), float(y[d, i]))
        for i, h in enumerate(cohort.hospital_ids)
        for d in range(x.shape[0])
    ]


# ---------------------------------------------------------------- p-values


@dataclass(frozen=True)
class PredictiveCheck:
    """Per-hospital predictive p-values and the replicate mean mortality (%)."""

    p: np.ndarray  # share of replicates with mortality >= observed
    p_lower: np.ndarray  # share of replicates with mortality <= observed
    observed_pct: np.ndarray
    replicated_pct: np.ndarray

    @property
    def difference_pp(self) -> np.ndarray:
        return self.observed_pct - self.replicated_pct

    @property
    def more_extreme(self) -> np.ndarray:
        """Probability on the observed side: ``min(p, p_lower)``."""
        return np.minimum(self.p, self.p_lower)


def _replicate_hospital(X_i, y_obs_sum, mu, tau2, beta1, rng, beta0=None):
    """Shares of replicates with at least / at most ``y_obs_sum`` deaths, and the mean replicate count."""
    D = len(mu)
    if beta0 is None:
        b0 = mu + np.sqrt(tau2) * rng.standard_normal(D)
    else:
        b0 = beta0
    p = expit(X_i @ beta1.T + b0)  # (n_i, D)
    deaths = (rng.random(p.shape) < p).sum(axis=0)
    return float(np.mean(deaths >= y_obs_sum)), float(np.mean(deaths <= y_obs_sum)), float(deaths.mean())


def _check(draws: PosteriorDraws, cohort: Cohort, tag: int, seed: int, reuse_beta0: bool = False) -> PredictiveCheck:
    # streams are keyed by hospital id rank so the result ignores input order
    _, order = cohort.canonical()
    mu, tau2, beta1 = draws.pooled("mu"), draws.pooled("tau2"), draws.pooled("beta1")
    beta0 = draws.pooled("beta0")
    I = cohort.n_hospitals
    p, lower, rep = np.empty(I), np.empty(I), np.empty(I)
    deaths, n = cohort.deaths_by_hospital(), cohort.volumes()
    for k, i in enumerate(order):
        rng = stream(seed, REPLICATE_STREAM, tag, k)
        p[i], lower[i], rep[i] = _replicate_hospital(
            cohort.X[cohort.rows_of(i)], deaths[i], mu, tau2, beta1, rng,
            beta0[:, i] if reuse_beta0 else None,
        )
    return PredictiveCheck(p, lower, 100.0 * deaths / n, 100.0 * rep / n)


def ppp_replication(
    spec: HierSpec,
    cohort: Cohort,
    cfg: ChainConfig,
    draws: PosteriorDraws | None = None,
    reuse_beta0: bool = False,
) -> PredictiveCheck:
    """Replication p-values. Replicate intercepts are redrawn from ``N(mu, tau^2)``
    unless ``reuse_beta0`` asks for the sampled hospital intercepts instead."""
    draws = draws if draws is not None else sample_hier(spec, cohort, cfg)
    return _check(draws, cohort, _TAG_REPLICATION, cfg.seed, reuse_beta0)


def ppp_fixed_tau(
    spec: HierSpec, cohort: Cohort, cfg: ChainConfig, draws: PosteriorDraws | None = None
) -> PredictiveCheck:
    """Replication p-values with ``tau`` held at the in-control value of a fixed prior."""
    if not spec.tau_prior.is_fixed:
        raise InputError("ppp_fixed_tau needs a fixed-tau prior")
    draws = draws if draws is not None else sample_hier(spec, cohort, cfg)
    return _check(draws, cohort, _TAG_FIXED, cfg.seed)


@dataclass(frozen=True)
class CrossValidation:
    check: PredictiveCheck
    mu_mean: np.ndarray  # posterior mean of mu without hospital i
    tau2_mean: np.ndarray
    tau2_median: np.ndarray


def ppp_crossval(spec: HierSpec, cohort: Cohort, cfg: ChainConfig, threads: int = 1) -> CrossValidation:
    """Leave-one-hospital-out predictive p-values.

    Fold ``k`` (hospital ``k`` in natural id order) refits with seed ``cfg.seed + k``.
    """
    I = cohort.n_hospitals
    if I < 3:
        raise InputError("cross-validation needs at least 3 hospitals")
    _, order = cohort.canonical()
    deaths, n = cohort.deaths_by_hospital(), cohort.volumes()

    def fold(k):
        i = int(order[k])
        rest = cohort.subset([j for j in range(I) if j != i])
        d = sample_hier(spec, rest, cfg.with_seed(cfg.seed + k))
        rng = stream(cfg.seed, REPLICATE_STREAM, _TAG_CROSSVAL, k)
        p, lower, rep = _replicate_hospital(
            cohort.X[cohort.rows_of(i)], deaths[i], d.pooled("mu"), d.pooled("tau2"), d.pooled("beta1"), rng
        )
        t2 = d.pooled("tau2")
        return i, p, lower, rep, float(d.pooled("mu").mean()), float(t2.mean()), float(np.median(t2))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fold, range(I)))
    else:
        results = [fold(k) for k in range(I)]
    p, lower, rep, mu_m, t2_m, t2_med = (np.empty(I) for _ in range(6))
    for i, *vals in results:
        p[i], lower[i], rep[i], mu_m[i], t2_m[i], t2_med[i] = vals
    return CrossValidation(PredictiveCheck(p, lower, 100.0 * deaths / n, 100.0 * rep / n), mu_m, t2_m, t2_med)


# ---------------------------------------------------------------- sensitivity


@dataclass(frozen=True)
class SensitivityRow:
    prior: str
    tau2: dict
    mu: dict
    converged: bool | None


def sensitivity_suite(cohort: Cohort, priors: list[PriorSpec], cfg: ChainConfig, threads: int = 1) -> list[SensitivityRow]:
    """Posterior summaries of ``tau2`` and ``mu`` under each prior, all fits sharing ``cfg.seed``."""
    if not priors:
        raise InputError("sensitivity analysis needs at least one prior")
    rows = []
    for prior in priors:
        d = sample_hier(HierSpec(prior), cohort, cfg, threads=threads)
        rows.append(
            SensitivityRow(
                prior.label(),
                {k: float(v) for k, v in _summ(d.pooled("tau2")).items()},
                {k: float(v) for k, v in _summ(d.pooled("mu")).items()},
                d.converged,
            )
        )
    return rows


def write_sensitivity_csv(rows: list[SensitivityRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prior", "tau2_mean", "tau2_median", "tau2_lo", "tau2_hi", "mu_mean", "mu_median", "mu_lo", "mu_hi", "converged"])
        for r in rows:
            w.writerow(
                [r.prior]
                + [repr(r.tau2[k]) for k in ("mean", "median", "lo", "hi")]
                + [repr(r.mu[k]) for k in ("mean", "median", "lo", "hi")]
                + [r.converged]
            )


# ---------------------------------------------------------------- report


def flag_level(p: float | None) -> str:
    """'extreme', 'suspect' or 'none' for a p-value (None when not computed)."""
    if p is None or np.isnan(p):
        return "none"
    if p <= EXTREME_CUTS[0] or p >= EXTREME_CUTS[1]:
        return "extreme"
    if p <= SUSPECT_CUTS[0] or p >= SUSPECT_CUTS[1]:
        return "suspect"
    return "none"


@dataclass
class HospitalProfile:
    hospital_id: str
    n: int
    deaths: int
    observed_pct: float
    expected_pct: float
    rsr_mean: float
    rsr_median: float
    rsr_lo: float
    rsr_hi: float
    ratio_mean: float
    ratio_lo: float
    ratio_hi: float
    excess_deaths: float
    p_replication: float
    p_fixed_tau: float | None
    p_crossval: float | None
    # probability on the observed side, min(P(rep >= obs), P(rep <= obs))
    tail_replication: float
    tail_fixed_tau: float
    tail_crossval: float | None
    difference_pp: float
    practically_significant: bool
    mu_loo: float | None = None
    tau2_loo: float | None = None
    flags: dict = field(default_factory=dict)


@dataclass
class ProfileReport:
    hospitals: list[HospitalProfile]
    state_rate_pct: float
    anchor_pct: float
    model: dict
    seed: int
    config_sha256: str
    diagnostics: dict

    def to_json(self) -> dict:
        return {
            "state_rate_pct": self.state_rate_pct,
            "anchor_pct": self.anchor_pct,
            "model": self.model,
            "seed": self.seed,
            "config_sha256": self.config_sha256,
            "diagnostics": self.diagnostics,
            "hospitals": [asdict(h) for h in self.hospitals],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    CSV_COLUMNS = (
        "hospital_id", "n", "deaths", "observed_pct", "expected_pct",
        "rsr_mean", "rsr_median", "rsr_lo", "rsr_hi", "excess_deaths",
        "p_replication", "p_fixed_tau", "p_crossval",
        "tail_replication", "tail_fixed_tau", "tail_crossval", "mu_loo", "tau2_loo",
        "difference_pp", "practically_significant",
        "flag_replication", "flag_fixed_tau", "flag_crossval",
    )

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.write(f"# seed: {self.seed}\n# config_sha256: {self.config_sha256}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for h in self.hospitals:
                row = asdict(h)
                for s in ("replication", "fixed_tau", "crossval"):
                    row[f"flag_{s}"] = h.flags.get(s, "none")
                w.writerow([_fmt(row[c]) for c in self.CSV_COLUMNS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(spec: HierSpec, cfg: ChainConfig, extra: dict | None = None) -> str:
    payload = {"model": spec.to_json(cfg.seed), "chains": cfg.to_json(), **(extra or {})}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def build_profile(
    spec: HierSpec,
    cohort: Cohort,
    cfg: ChainConfig,
    anchor: float | None = None,
    in_control_tau: float = IN_CONTROL_TAU,
    crossval: bool = False,
    practical_pp: float = PRACTICAL_DIFFERENCE_PP,
    threads: int = 1,
    draws: PosteriorDraws | None = None,
) -> tuple[ProfileReport, PosteriorDraws]:
    """Fit the model and assemble the per-hospital report.

    The fixed-tau check uses ``in_control_tau``; when ``spec`` already fixes
    ``tau`` the main fit serves both checks. ``anchor`` defaults to the
    cohort's pooled crude rate.
    """
    draws = draws if draws is not None else sample_hier(spec, cohort, cfg, threads=threads)
    state = 100.0 * cohort.pooled_rate()
    anchor = state if anchor is None else float(anchor)
    expected = expected_rate_hier(draws, cohort)
    rsr = risk_standardized_rate(draws, cohort, anchor)
    excess = excess_deaths(rsr)
    rep = ppp_replication(spec, cohort, cfg, draws=draws)
    if spec.tau_prior.is_fixed:
        fixed = _check(draws, cohort, _TAG_FIXED, cfg.seed)
        fixed_tau = spec.fixed_tau
    else:
        fixed_spec = HierSpec(PriorSpec.fixed(in_control_tau), spec.mu_prior_var, spec.beta_prior_var)
        fixed = ppp_fixed_tau(fixed_spec, cohort, cfg, draws=sample_hier(fixed_spec, cohort, cfg, threads=threads))
        fixed_tau = in_control_tau
    cv = ppp_crossval(spec, cohort, cfg, threads=threads) if crossval else None

    deaths, n = cohort.deaths_by_hospital(), cohort.volumes()
    hospitals = []
    for i, h in enumerate(cohort.hospital_ids):
        pc = float(cv.check.p[i]) if cv else None
        diff = float(rep.difference_pp[i])
        hospitals.append(
            HospitalProfile(
                hospital_id=h,
                n=int(n[i]),
                deaths=int(deaths[i]),
                observed_pct=float(100.0 * deaths[i] / n[i]),
                expected_pct=float(expected.mean[i]),
                rsr_mean=float(rsr.rate.mean[i]),
                rsr_median=float(rsr.rate.median[i]),
                rsr_lo=float(rsr.rate.lo[i]),
                rsr_hi=float(rsr.rate.hi[i]),
                ratio_mean=float(rsr.ratio.mean[i]),
                ratio_lo=float(rsr.ratio.lo[i]),
                ratio_hi=float(rsr.ratio.hi[i]),
                excess_deaths=float(excess[i]),
                p_replication=float(rep.p[i]),
                p_fixed_tau=float(fixed.p[i]),
                p_crossval=pc,
                tail_replication=float(rep.more_extreme[i]),
                tail_fixed_tau=float(fixed.more_extreme[i]),
                tail_crossval=float(cv.check.more_extreme[i]) if cv else None,
                difference_pp=diff,
                practically_significant=bool(abs(diff) >= practical_pp),
                mu_loo=float(cv.mu_mean[i]) if cv else None,
                tau2_loo=float(cv.tau2_mean[i]) if cv else None,
                flags={
                    "replication": flag_level(rep.p[i]),
                    "fixed_tau": flag_level(fixed.p[i]),
                    "crossval": flag_level(pc),
                },
            )
        )
    extra = {"anchor": anchor, "in_control_tau": fixed_tau, "crossval": crossval, "practical_pp": practical_pp}
    model = {
        **spec.to_json(),
        "prior_label": spec.tau_prior.label(),
        "fixed_tau_check": fixed_tau,
        "extreme_cuts": list(EXTREME_CUTS),
        "suspect_cuts": list(SUSPECT_CUTS),
        "practical_difference_pp": practical_pp,
        "chains": cfg.to_json(),
    }
    diag = {
        "converged": draws.converged,
        "max_rhat": draws.metadata.get("max_rhat"),
        "max_rhat_parameter": draws.metadata.get("max_rhat_parameter"),
        "tau2_mean": float(draws.pooled("tau2").mean()),
        "mu_mean": float(draws.pooled("mu").mean()),
    }
    report = ProfileReport(hospitals, state, anchor, model, cfg.seed, config_hash(spec, cfg, extra), diag)
    return report, draws


def write_caterpillar_csv(report: ProfileReport, path) -> None:
    """Per-hospital interval data sorted by posterior mean rate."""
    rows = sorted(report.hospitals, key=lambda h: (h.rsr_mean, h.hospital_id))
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# seed: {report.seed}\n# config_sha256: {report.config_sha256}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hospital_id", "rsr_mean", "rsr_median", "rsr_lo", "rsr_hi", "anchor_pct"])
        for h in rows:
            w.writerow([h.hospital_id, repr(h.rsr_mean), repr(h.rsr_median), repr(h.rsr_lo), repr(h.rsr_hi), repr(report.anchor_pct)])


def write_scatter_csv(rows, path, seed: int, config_sha256: str) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# seed: {seed}\n# config_sha256: {config_sha256}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hospital_id", "draw", "expected_pct", "predicted_pct"])
        for h, d, x, y in rows:
            w.writerow([h, d, repr(x), repr(y)])

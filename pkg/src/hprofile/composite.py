"""Composite quality scores from several process measures.

Item response models use ``logit p_ik = b0_k + b1_k * theta_i`` with
``b1_k > 0``, so higher ``theta`` means a higher chance of receiving needed
therapy and measure ``k``'s curve crosses 0.5 at ``theta = -b0_k / b1_k``.
Negating ``theta`` gives the equivalent ``b0_k - b1_k * theta`` form.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import log_expit

from .errors import AllEligibleZero, BadValue, DegeneratePanel, InputError, MissingColumn
from .registry import natural_key
from .sampler import Block, ChainConfig, PosteriorDraws, run_mwg
from .sampler.engine import JointMove

TOP_PERCENTILE = 90
THETA_PRIOR_VAR = 1.0
DIFFICULTY_PRIOR_VAR = 100.0
DISCRIMINATION_PRIOR_VAR = 1.0


@dataclass(frozen=True)
class MeasurePanel:
    """Counts per hospital and measure: ``Y`` received needed therapy out of ``N`` eligible."""

    hospital_ids: tuple[str, ...]
    measure_ids: tuple[str, ...]
    Y: np.ndarray
    N: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y)
        N = np.asarray(self.N)
        shape = (len(self.hospital_ids), len(self.measure_ids))
        if Y.shape != shape or N.shape != shape:
            raise InputError(f"panel counts must have shape {shape}")
        if np.any(Y < 0) or np.any(Y > N):
            i, k = np.argwhere((Y < 0) | (Y > N))[0]
            raise InputError(
                f"hospital {self.hospital_ids[i]}, measure {self.measure_ids[k]}: need 0 <= numerator <= denominator"
            )
        empty = np.flatnonzero(N.sum(axis=1) == 0)
        if len(empty):
            raise AllEligibleZero(f"hospital {self.hospital_ids[empty[0]]} has no eligible patients")
        object.__setattr__(self, "Y", Y.astype(np.int64))
        object.__setattr__(self, "N", N.astype(np.int64))
        self.Y.setflags(write=False)
        self.N.setflags(write=False)

    @property
    def shape(self):
        return self.Y.shape

    def drop_measures(self, keep) -> "MeasurePanel":
        keep = np.asarray(keep)
        return MeasurePanel(
            self.hospital_ids, tuple(m for m, k in zip(self.measure_ids, keep) if k), self.Y[:, keep], self.N[:, keep]
        )


# ---------------------------------------------------------------- simple composites


def nearest_rank_percentile(values, q: float) -> float:
    """Smallest value with at least ``q`` percent of the values at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


@dataclass(frozen=True)
class PooledComposite:
    hospital_ids: tuple[str, ...]
    rates: np.ndarray
    threshold: float
    top: np.ndarray  # bool per hospital


def pooled_composite(panel: MeasurePanel, percentile: float = TOP_PERCENTILE) -> PooledComposite:
    """All successes over all eligible opportunities per hospital, with top-group flags."""
    den = panel.N.sum(axis=1)
    if np.any(den == 0):
        raise AllEligibleZero("a hospital has no eligible patients")
    rates = panel.Y.sum(axis=1) / den
    threshold = nearest_rank_percentile(rates, percentile)
    return PooledComposite(panel.hospital_ids, rates, threshold, rates >= threshold)


@dataclass(frozen=True)
class PatientMeasure:
    hospital_id: str
    patient_id: str
    measure_id: str
    eligible: bool
    received: bool


def all_or_none(records) -> dict[str, float]:
    """Share of eligible patients who received every measure they were eligible for.

    Patients eligible for nothing are left out; a hospital with no eligible
    patient gets ``nan``.
    """
    eligible = defaultdict(set)
    success = defaultdict(set)
    hospitals = {}
    for r in records:
        key = (r.hospital_id, r.patient_id)
        hospitals.setdefault(r.hospital_id, set()).add(key)
        if r.received and not r.eligible:
            raise InputError(
                f"patient {r.patient_id} at hospital {r.hospital_id} received measure {r.measure_id} without being eligible"
            )
        if r.eligible:
            eligible[key].add(r.measure_id)
            if r.received:
                success[key].add(r.measure_id)
    out = {}
    for h in sorted(hospitals, key=natural_key):
        scores = [success[k] == eligible[k] for k in sorted(hospitals[h]) if eligible[k]]
        out[h] = float(np.mean(scores)) if scores else float("nan")
    return out


# ---------------------------------------------------------------- item response models


class IrtKind(str, Enum):
    RASCH = "rasch"
    TWO_PL = "two_pl"


def _binomial_ll(Y, N, eta):
    return Y * log_expit(eta) + (N - Y) * log_expit(-eta)


def irt_log_posterior(panel: MeasurePanel, theta, difficulty, discrimination) -> float:
    """Unnormalised log posterior; ``discrimination`` is a scalar for the Rasch model."""
    theta = np.asarray(theta, dtype=float)
    b0 = np.asarray(difficulty, dtype=float)
    b1 = np.broadcast_to(np.asarray(discrimination, dtype=float), b0.shape)
    if np.any(b1 <= 0):
        return -math.inf
    eta = b0[None, :] + theta[:, None] * b1[None, :]
    ll = float(np.sum(_binomial_ll(panel.Y, panel.N, eta)))
    prior = -0.5 * float(np.sum(theta**2)) / THETA_PRIOR_VAR
    prior += -0.5 * float(np.sum(b0**2)) / DIFFICULTY_PRIOR_VAR
    prior += -0.5 * float(np.sum(np.asarray(discrimination, dtype=float) ** 2)) / DISCRIMINATION_PRIOR_VAR
    return ll + prior


def theta_log_likelihood(panel: MeasurePanel, theta, difficulty, discrimination) -> np.ndarray:
    """The part of each hospital's log likelihood that depends on ``theta``.

    ``b1_k * theta * Y_ik - N_ik * log(1 + exp(b0_k + b1_k * theta))`` summed over
    measures. Under the Rasch model the data enter only through the row totals
    of ``Y`` (for fixed ``N``).
    """
    theta = np.asarray(theta, dtype=float)
    b0 = np.asarray(difficulty, dtype=float)
    if np.ndim(discrimination) == 0:
        eta = b0[None, :] + float(discrimination) * theta[:, None]
        linear = float(discrimination) * theta * panel.Y.sum(axis=1)
    else:
        b1 = np.asarray(discrimination, dtype=float)
        eta = b0[None, :] + theta[:, None] * b1[None, :]
        linear = theta * (panel.Y @ b1)
    return linear + np.sum(panel.N * log_expit(-eta), axis=1)


def degenerate_measures(panel: MeasurePanel) -> np.ndarray:
    """Measures whose observed cells are all zero or all full."""
    has = panel.N > 0
    zero = np.all((panel.Y == 0) | ~has, axis=0)
    full = np.all((panel.Y == panel.N) | ~has, axis=0)
    return zero | full


@dataclass(frozen=True)
class IrtFit:
    kind: IrtKind
    hospital_ids: tuple[str, ...]
    measure_ids: tuple[str, ...]
    dropped: tuple[str, ...]
    draws: PosteriorDraws

    def _summary(self, name):
        d = self.draws.pooled(name)
        q = np.percentile(d, [2.5, 50, 97.5], axis=0)
        return {"mean": d.mean(axis=0), "sd": d.std(axis=0, ddof=1), "lo": q[0], "median": q[1], "hi": q[2]}

    @property
    def theta(self) -> dict:
        return self._summary("theta")

    @property
    def difficulty(self) -> dict:
        return self._summary("difficulty")

    @property
    def discrimination(self) -> dict:
        """Per-measure summaries; the Rasch scalar is repeated for every measure."""
        s = self._summary("discrimination")
        if self.kind is IrtKind.RASCH:
            K = len(self.measure_ids)
            return {k: np.full(K, float(v)) for k, v in s.items()}
        return s

    def midpoints(self) -> np.ndarray:
        """``theta`` at which each curve crosses 0.5 (posterior-mean parameters)."""
        return -self.difficulty["mean"] / self.discrimination["mean"]

    def to_json(self) -> dict:
        th, b0, b1 = self.theta, self.difficulty, self.discrimination
        return {
            "kind": self.kind.value,
            "dropped_measures": list(self.dropped),
            "converged": self.draws.converged,
            "max_rhat": self.draws.metadata.get("max_rhat"),
            "hospitals": [
                {"hospital_id": h, **{f"theta_{k}": float(th[k][i]) for k in ("mean", "sd", "lo", "median", "hi")}}
                for i, h in enumerate(self.hospital_ids)
            ],
            "measures": [
                {
                    "measure_id": m,
                    **{f"difficulty_{k}": float(b0[k][j]) for k in ("mean", "sd", "lo", "hi")},
                    **{f"discrimination_{k}": float(b1[k][j]) for k in ("mean", "sd", "lo", "hi")},
                }
                for j, m in enumerate(self.measure_ids)
            ],
        }


def fit_irt(panel: MeasurePanel, kind: IrtKind | str, cfg: ChainConfig) -> IrtFit:
    """Posterior for the Rasch (shared discrimination) or two-parameter model.

    Priors: ``theta ~ N(0, 1)``, difficulty ``~ N(0, 100)``, discrimination
    half-normal with variance 1. Measures with no variation (all cells empty
    or all full) are dropped with a warning.
    """
    kind = IrtKind(kind)
    I, K = panel.shape
    if I < 3 or K < 2:
        raise InputError(f"item response fit needs at least 3 hospitals and 2 measures (have {I} and {K})")
    bad = degenerate_measures(panel)
    dropped = tuple(m for m, b in zip(panel.measure_ids, bad) if b)
    if dropped:
        warnings.warn(f"dropping measures without variation: {', '.join(dropped)}", stacklevel=2)
        panel = panel.drop_measures(~bad)
        if len(panel.measure_ids) < 2:
            raise DegeneratePanel("fewer than 2 measures remain after dropping degenerate ones")
        if np.any(panel.N.sum(axis=1) == 0):
            raise DegeneratePanel("a hospital has no eligible patients on the remaining measures")
    K = len(panel.measure_ids)
    Y, N = panel.Y.astype(float), panel.N.astype(float)
    rasch = kind is IrtKind.RASCH

    def eta(s):
        return s["difficulty"][None, :] + s["theta"][:, None] * s["discrimination"][None, :]

    def lt_theta(s):
        return _binomial_ll(Y, N, eta(s)).sum(axis=1) - 0.5 * s["theta"] ** 2 / THETA_PRIOR_VAR

    def lt_b0(s):
        return _binomial_ll(Y, N, eta(s)).sum(axis=0) - 0.5 * s["difficulty"] ** 2 / DIFFICULTY_PRIOR_VAR

    def lt_b1(s):
        b1 = s["discrimination"]
        prior = -0.5 * b1**2 / DISCRIMINATION_PRIOR_VAR
        ll = _binomial_ll(Y, N, eta(s))
        if rasch:
            return np.array([ll.sum()]) + prior
        return ll.sum(axis=0) + prior

    n_b1 = 1 if rasch else K
    blocks = [
        Block("theta", I, lt_theta),
        Block("difficulty", K, lt_b0),
        Block("discrimination", n_b1, lt_b1, positive=True, initial_scale=0.2),
    ]
    def log_prior(s):
        return -0.5 * (
            np.sum(s["theta"] ** 2) / THETA_PRIOR_VAR
            + np.sum(s["difficulty"] ** 2) / DIFFICULTY_PRIOR_VAR
            + np.sum(s["discrimination"] ** 2) / DISCRIMINATION_PRIOR_VAR
        )

    # Both maps leave every b0_k + b1_k * theta_i unchanged, so only the priors
    # and the Jacobian enter the acceptance ratio.
    def rescale(s, step):
        lam = np.exp(step)
        new = dict(s, theta=s["theta"] / lam, discrimination=s["discrimination"] * lam)
        return new, step * (n_b1 - I)  # Jacobian of the linear map

    def shift(s, step):
        return dict(s, theta=s["theta"] + step, difficulty=s["difficulty"] - step * s["discrimination"]), 0.0

    pooled = (Y.sum(axis=0) + 0.5) / (N.sum(axis=0) + 1.0)
    rate = (Y.sum(axis=1) + 0.5) / (N.sum(axis=1) + 1.0)
    z = np.log(rate / (1 - rate))
    z = (z - z.mean()) / (z.std() if z.std() > 0 else 1.0)

    def init(rng):
        return {
            "theta": z + 0.1 * rng.standard_normal(I),
            "difficulty": np.log(pooled / (1 - pooled)) + 0.1 * rng.standard_normal(K),
            "discrimination": np.exp(0.1 * rng.standard_normal(n_b1)),
        }

    labels = {"theta": panel.hospital_ids, "difficulty": panel.measure_ids}
    if not rasch:
        labels["discrimination"] = panel.measure_ids
    draws = run_mwg(
        blocks,
        init,
        cfg,
        labels=labels,
        metadata={"model": f"irt_{kind.value}"},
        scalar=("discrimination",) if rasch else (),
        moves=(JointMove("rescale", rescale, log_prior), JointMove("shift", shift, log_prior)),
    )
    return IrtFit(kind, panel.hospital_ids, panel.measure_ids, dropped, draws)


def icc_data(fit: IrtFit, grid) -> dict[str, np.ndarray]:
    """Probability of needed therapy over ``grid`` for each measure, at posterior-mean parameters."""
    grid = np.asarray(grid, dtype=float)
    b0 = fit.difficulty["mean"]
    b1 = fit.discrimination["mean"]
    return {m: 1.0 / (1.0 + np.exp(-(b0[k] + b1[k] * grid))) for k, m in enumerate(fit.measure_ids)}


# ---------------------------------------------------------------- files


def _read_rows(path, required):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumn(f"{path}: missing column {missing[0]!r}")
        return list(enumerate(reader, start=1))


def _count(row_no, row, column):
    value = row[column]
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise BadValue(row_no, column, value) from None
    if v < 0:
        raise BadValue(row_no, column, value)
    return v


def read_panel_csv(path) -> MeasurePanel:
    """Columns ``hospital_id, measure_id, numerator, denominator``; missing cells count as 0/0."""
    rows = _read_rows(path, ("hospital_id", "measure_id", "numerator", "denominator"))
    cells = {}
    for n, r in rows:
        key = (r["hospital_id"], r["measure_id"])
        if key in cells:
            raise InputError(f"row {n}: duplicate cell for hospital {key[0]}, measure {key[1]}")
        cells[key] = (_count(n, r, "numerator"), _count(n, r, "denominator"))
    if not cells:
        raise InputError(f"{path}: no rows")
    hospitals = tuple(sorted({h for h, _ in cells}, key=natural_key))
    measures = tuple(sorted({m for _, m in cells}, key=natural_key))
    Y = np.zeros((len(hospitals), len(measures)), dtype=np.int64)
    N = np.zeros_like(Y)
    hi = {h: i for i, h in enumerate(hospitals)}
    mi = {m: k for k, m in enumerate(measures)}
    for (h, m), (y, n) in cells.items():
        Y[hi[h], mi[m]], N[hi[h], mi[m]] = y, n
    return MeasurePanel(hospitals, measures, Y, N)


def write_panel_csv(panel: MeasurePanel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hospital_id", "measure_id", "numerator", "denominator"])
        for i, h in enumerate(panel.hospital_ids):
            for k, m in enumerate(panel.measure_ids):
                w.writerow([h, m, int(panel.Y[i, k]), int(panel.N[i, k])])


def read_patient_csv(path) -> list[PatientMeasure]:
    """Columns ``hospital_id, patient_id, measure_id, eligible, received`` with 0/1 flags."""
    rows = _read_rows(path, ("hospital_id", "patient_id", "measure_id", "eligible", "received"))
    out = []
    for n, r in rows:
        flags = []
        for c in ("eligible", "received"):
            if r[c] not in ("0", "1"):
                raise BadValue(n, c, r[c])
            flags.append(r[c] == "1")
        out.append(PatientMeasure(r["hospital_id"], r["patient_id"], r["measure_id"], *flags))
    if not out:
        raise InputError(f"{path}: no rows")
    return out


def panel_from_patients(records) -> MeasurePanel:
    """Aggregate patient-level rows into counts (eligible patients as denominators)."""
    cells = defaultdict(lambda: [0, 0])
    for r in records:
        if r.eligible:
            c = cells[(r.hospital_id, r.measure_id)]
            c[1] += 1
            c[0] += int(r.received)
        else:
            cells.setdefault((r.hospital_id, r.measure_id), [0, 0])
    hospitals = tuple(sorted({h for h, _ in cells}, key=natural_key))
    measures = tuple(sorted({m for _, m in cells}, key=natural_key))
    Y = np.zeros((len(hospitals), len(measures)), dtype=np.int64)
    N = np.zeros_like(Y)
    for (h, m), (y, n) in cells.items():
        Y[hospitals.index(h), measures.index(m)] = y
        N[hospitals.index(h), measures.index(m)] = n
    return MeasurePanel(hospitals, measures, Y, N)

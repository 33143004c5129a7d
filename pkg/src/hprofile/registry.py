"""Patient registry: data model, CSV ingestion, summaries and synthetic cohorts.

A cohort is stored column-wise. The 18-column design matrix is the canonical
representation of the risk factors; :class:`PatientRecord` objects are built
on demand and convert losslessly to and from design rows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .errors import (
    BadEnumValue,
    BadValue,
    EmptyCohort,
    InputError,
    MissingColumn,
    NegativeAge,
    UnattainableTarget,
)


class EjectionFraction(str, Enum):
    GE40 = "ge40"
    LT30_OR_MISSING = "lt30_or_missing"
    B30TO39 = "b30to39"


class MiTiming(str, Enum):
    NONE = "none"
    LE6H = "le6h"
    H7TO24 = "h7to24"
    D1TO7 = "d1to7"
    D8TO21 = "d8to21"
    GT21D = "gt21d"


class Status(str, Enum):
    ELECTIVE = "elective"
    URGENT = "urgent"
    EMERGENT = "emergent"


BINARY_FLAGS = (
    "male",
    "renal_failure",
    "diabetes",
    "hypertension",
    "pvd",
    "prior_pci",
    "shock",
    "iabp",
)

# (csv column, enum, non-reference levels in design order)
CATEGORICALS = (
    ("ef_cat", EjectionFraction, (EjectionFraction.LT30_OR_MISSING, EjectionFraction.B30TO39)),
    (
        "mi_cat",
        MiTiming,
        (MiTiming.LE6H, MiTiming.H7TO24, MiTiming.D1TO7, MiTiming.D8TO21, MiTiming.GT21D),
    ),
    ("status", Status, (Status.URGENT, Status.EMERGENT)),
)
_PREFIX = {"ef_cat": "ef", "mi_cat": "mi", "status": "status"}

COVARIATES = (
    ("yrs_over_65",)
    + BINARY_FLAGS
    + tuple(
        f"{_PREFIX[col]}_{level.value}" for col, _, levels in CATEGORICALS for level in levels
    )
)
N_COVARIATES = len(COVARIATES)
assert N_COVARIATES == 18

CSV_COLUMNS = (
    ("hospital_id", "death30", "yrs_over_65")
    + BINARY_FLAGS
    + ("ef_cat", "mi_cat", "status")
)

# first design column of each categorical group
_GROUP_START = {}
_pos = 1 + len(BINARY_FLAGS)
for _col, _, _levels in CATEGORICALS:
    _GROUP_START[_col] = _pos
    _pos += len(_levels)


@dataclass(frozen=True)
class PatientRecord:
    hospital_id: str
    death30: int
    yrs_over_65: float
    male: int = 0
    renal_failure: int = 0
    diabetes: int = 0
    hypertension: int = 0
    pvd: int = 0
    prior_pci: int = 0
    shock: int = 0
    iabp: int = 0
    ef_cat: EjectionFraction = EjectionFraction.GE40
    mi_cat: MiTiming = MiTiming.NONE
    status: Status = Status.ELECTIVE

    def design(self) -> np.ndarray:
        x = np.zeros(N_COVARIATES)
        x[0] = self.yrs_over_65
        for k, name in enumerate(BINARY_FLAGS):
            x[1 + k] = getattr(self, name)
        for col, _, levels in CATEGORICALS:
            value = getattr(self, col)
            if value in levels:
                x[_GROUP_START[col] + levels.index(value)] = 1.0
        return x

    @classmethod
    def from_design(cls, hospital_id: str, death30: int, x: np.ndarray) -> "PatientRecord":
        kwargs = {name: int(x[1 + k]) for k, name in enumerate(BINARY_FLAGS)}
        for col, enum, levels in CATEGORICALS:
            start = _GROUP_START[col]
            hot = np.flatnonzero(x[start : start + len(levels)])
            kwargs[col] = levels[hot[0]] if hot.size else next(iter(enum))
        return cls(hospital_id, int(death30), float(x[0]), **kwargs)


@dataclass(frozen=True)
class Cohort:
    """Admissions in registry order.

    ``hospital`` holds, for every row, the index into ``hospital_ids``.
    """

    hospital_ids: tuple[str, ...]
    hospital: np.ndarray
    death: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        if self.X.shape != (len(self.death), N_COVARIATES) or len(self.hospital) != len(self.death):
            raise InputError("cohort arrays have inconsistent shapes")
        counts = np.bincount(self.hospital, minlength=len(self.hospital_ids))
        if len(counts) != len(self.hospital_ids) or np.any(counts == 0):
            raise InputError("every listed hospital needs at least one record")
        for arr in (self.hospital, self.death, self.X):
            arr.setflags(write=False)

    @classmethod
    def from_records(cls, records) -> "Cohort":
        records = list(records)
        if not records:
            raise EmptyCohort("cohort has no records")
        ids: dict[str, int] = {}
        hosp = np.array([ids.setdefault(r.hospital_id, len(ids)) for r in records], dtype=np.int64)
        death = np.array([r.death30 for r in records], dtype=np.int64)
        X = np.array([r.design() for r in records], dtype=float)
        return cls(tuple(ids), hosp, death, X)

    @property
    def n_patients(self) -> int:
        return len(self.death)

    @property
    def n_hospitals(self) -> int:
        return len(self.hospital_ids)

    @property
    def records(self) -> list[PatientRecord]:
        return [
            PatientRecord.from_design(self.hospital_ids[h], d, x)
            for h, d, x in zip(self.hospital, self.death, self.X)
        ]

    def volumes(self) -> np.ndarray:
        return np.bincount(self.hospital, minlength=self.n_hospitals)

    def deaths_by_hospital(self) -> np.ndarray:
        return np.bincount(self.hospital, weights=self.death, minlength=self.n_hospitals).astype(
            np.int64
        )

    def pooled_rate(self) -> float:
        return float(self.death.mean())

    def subset(self, keep_hospitals) -> "Cohort":
        """Cohort restricted to the given hospital indices (order of ``hospital_ids`` kept)."""
        keep = sorted(set(int(i) for i in keep_hospitals))
        remap = -np.ones(self.n_hospitals, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        rows = remap[self.hospital] >= 0
        return Cohort(
            tuple(self.hospital_ids[i] for i in keep),
            remap[self.hospital[rows]],
            self.death[rows].copy(),
            self.X[rows].copy(),
        )

    def rows_of(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.hospital == i)

    def canonical(self) -> tuple["Cohort", np.ndarray]:
        """Hospitals in natural id order with rows grouped by hospital.

        Returns the reordered cohort and ``order``, where ``order[k]`` is the
        index in this cohort of the canonical cohort's hospital ``k``. Rows keep
        their relative order within a hospital.
        """
        order = np.array(sorted(range(self.n_hospitals), key=lambda i: natural_key(self.hospital_ids[i])), dtype=np.int64)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        new_h = rank[self.hospital]
        rows = np.argsort(new_h, kind="stable")
        return (
            Cohort(tuple(self.hospital_ids[i] for i in order), new_h[rows], self.death[rows].copy(), self.X[rows].copy()),
            order,
        )


def natural_key(hospital_id: str):
    """Sort key placing numeric ids in numeric order ahead of other ids."""
    return (0, int(hospital_id), "") if hospital_id.isdigit() else (1, 0, hospital_id)


# ---------------------------------------------------------------- CSV


def _parse_flag(value, row, column):
    if value not in ("0", "1"):
        raise BadValue(row, column, value)
    return int(value)


def ingest_csv(path) -> Cohort:
    """Read a registry CSV with the exact header ``CSV_COLUMNS``.

    Rows are numbered from 1 (the first data row). Malformed rows are rejected,
    never coerced.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: file has no header") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column {missing[0]!r}")
        if tuple(header) != CSV_COLUMNS:
            raise MissingColumn(f"{path}: header must be exactly {','.join(CSV_COLUMNS)}")
        records = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise BadValue(row_no, "<row>", ",".join(row))
            records.append(_parse_row(dict(zip(CSV_COLUMNS, (c.strip() for c in row))), row_no))
    if not records:
        raise EmptyCohort(f"{path}: no data rows")
    return Cohort.from_records(records)


def _parse_row(raw: dict, row_no: int) -> PatientRecord:
    hid = raw["hospital_id"]
    if not hid:
        raise BadValue(row_no, "hospital_id", hid)
    death = _parse_flag(raw["death30"], row_no, "death30")
    try:
        age = float(raw["yrs_over_65"])
    except ValueError:
        raise BadValue(row_no, "yrs_over_65", raw["yrs_over_65"]) from None
    if not math.isfinite(age):
        raise BadValue(row_no, "yrs_over_65", raw["yrs_over_65"])
    if age < 0:
        raise NegativeAge(row_no, age)
    flags = {name: _parse_flag(raw[name], row_no, name) for name in BINARY_FLAGS}
    cats = {}
    for col, enum, _ in CATEGORICALS:
        try:
            cats[col] = enum(raw[col].lower())
        except ValueError:
            raise BadEnumValue(row_no, col, raw[col]) from None
    return PatientRecord(hid, death, age, **flags, **cats)


def emit_csv(cohort: Cohort, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in cohort.records:
            writer.writerow(
                [r.hospital_id, r.death30, repr(r.yrs_over_65)]
                + [getattr(r, f) for f in BINARY_FLAGS]
                + [r.ef_cat.value, r.mi_cat.value, r.status.value]
            )


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class HospitalSummary:
    hospital_id: str
    n: int
    deaths: int
    rate_pct: float


def summarize(cohort: Cohort) -> list[HospitalSummary]:
    """Per-hospital volume, deaths and crude rate (%), followed by an ``All`` row."""
    n = cohort.volumes()
    d = cohort.deaths_by_hospital()
    rows = [
        HospitalSummary(h, int(ni), int(di), 100.0 * float(di) / float(ni))
        for h, ni, di in zip(cohort.hospital_ids, n, d)
    ]
    total_n, total_d = int(n.sum()), int(d.sum())
    rows.append(HospitalSummary("All", total_n, total_d, 100.0 * total_d / total_n))
    return rows


# ---------------------------------------------------------------- calibration targets


@dataclass(frozen=True)
class HospitalTarget:
    hospital_id: str
    volume: int
    expected_pct: float
    deaths: int | None = None


@dataclass(frozen=True)
class CalibrationTargets:
    hospitals: tuple[HospitalTarget, ...]
    prevalence_pct: dict
    odds_ratios: dict = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        if not self.hospitals:
            raise InputError("targets: no hospitals")
        for h in self.hospitals:
            if h.volume < 1:
                raise InputError(f"targets: hospital {h.hospital_id!r} field 'volume' must be >= 1")
            if not 0 < h.expected_pct < 100:
                raise InputError(f"targets: hospital {h.hospital_id!r} field 'expected_pct' out of range")
            if h.deaths is not None and not 0 <= h.deaths <= h.volume:
                raise InputError(f"targets: hospital {h.hospital_id!r} field 'deaths' out of range")
        for name, value in _flat_prevalences(self.prevalence_pct).items():
            if name != "yrs_over_65" and not 0 <= value <= 100:
                raise InputError(f"targets: prevalence_pct field {name!r} outside [0, 100]")
        for name, value in self.odds_ratios.items():
            if not value > 0:
                raise InputError(f"targets: odds_ratios field {name!r} must be > 0")

    def crude_rate_pct(self) -> float | None:
        if any(h.deaths is None for h in self.hospitals):
            return None
        return 100.0 * sum(h.deaths for h in self.hospitals) / sum(h.volume for h in self.hospitals)

    def log_odds(self) -> np.ndarray:
        return np.array([math.log(self.odds_ratios[c]) for c in COVARIATES])

    def with_volume(self, volume: int) -> "CalibrationTargets":
        """Same targets with every hospital resized; death counts are dropped."""
        hs = tuple(HospitalTarget(h.hospital_id, volume, h.expected_pct) for h in self.hospitals)
        return CalibrationTargets(hs, self.prevalence_pct, self.odds_ratios, self.name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "hospitals": [
                {"id": h.hospital_id, "volume": h.volume, "deaths": h.deaths, "expected_pct": h.expected_pct}
                for h in self.hospitals
            ],
            "prevalence_pct": self.prevalence_pct,
            "odds_ratios": self.odds_ratios,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationTargets":
        try:
            hospitals = tuple(
                HospitalTarget(
                    str(h["id"]),
                    int(h["volume"]),
                    float(h["expected_pct"]),
                    None if h.get("deaths") is None else int(h["deaths"]),
                )
                for h in obj["hospitals"]
            )
            prev = obj["prevalence_pct"]
            _flat_prevalences(prev)
        except KeyError as exc:
            raise InputError(f"targets: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise InputError(f"targets: malformed field ({exc})") from None
        return cls(hospitals, prev, dict(obj.get("odds_ratios", {})), obj.get("name", "custom"))


def _flat_prevalences(prev: dict) -> dict:
    out = {"yrs_over_65": float(prev["yrs_over_65"])}
    for name in BINARY_FLAGS:
        out[name] = float(prev[name])
    for col, enum, _ in CATEGORICALS:
        for level in enum:
            out[f"{col}:{level.value}"] = float(prev[col][level.value])
    return out


def load_targets(path=None) -> CalibrationTargets:
    """Load calibration targets; without a path, the shipped Massachusetts set."""
    if path is None:
        text = resources.files("hprofile.data").joinpath("massachusetts_targets.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read targets file: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"targets file is not valid JSON: {exc}") from None
    return CalibrationTargets.from_json(obj)


def load_coefficients(path=None) -> tuple[float, np.ndarray]:
    """Return ``(intercept, slopes)`` from a coefficient JSON file.

    The file holds ``{"intercept": float, "coefficients": {covariate: log-odds}}``.
    """
    if path is None:
        text = resources.files("hprofile.data").joinpath("massachusetts_coefficients.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read coefficients file: {exc}") from None
    try:
        obj = json.loads(text)
        intercept = float(obj["intercept"])
        coef = np.array([float(obj["coefficients"][c]) for c in COVARIATES])
    except json.JSONDecodeError as exc:
        raise InputError(f"coefficients file is not valid JSON: {exc}") from None
    except KeyError as exc:
        raise InputError(f"coefficients: missing field {exc.args[0]!r}") from None
    if not (math.isfinite(intercept) and np.all(np.isfinite(coef))):
        raise InputError("coefficients: non-finite value")
    return intercept, coef


# ---------------------------------------------------------------- synthetic cohorts

AGE_MEAN = 1.5
AGE_SD = 4.0
AGE_MAX = 30.0
TILT_BRACKET = (-20.0, 20.0)
TILT_ITERATIONS = 60
TILT_TOLERANCE_PP = 0.15


class CovariateModel:
    """Independent factor distributions with a scalar exponential tilt.

    Tilting by ``s`` shifts every binary factor's log-odds by ``s * coef`` and
    reweights each categorical level by ``exp(s * coef_level)``; the age mean
    moves by ``s * coef_age * AGE_SD**2``. With common random numbers the
    resulting risk score is nondecreasing in ``s``.
    """

    def __init__(self, prevalence_pct: dict, coef: np.ndarray):
        self.coef = np.asarray(coef, dtype=float)
        self.age_mean = float(prevalence_pct["yrs_over_65"])
        self.binary_logit = np.array(
            [logit(float(prevalence_pct[name]) / 100.0) for name in BINARY_FLAGS]
        )
        self.binary_coef = self.coef[1 : 1 + len(BINARY_FLAGS)]
        self.groups = []
        for col, enum, levels in CATEGORICALS:
            probs = np.array([float(prevalence_pct[col][lv.value]) for lv in enum])
            probs = probs / probs.sum()
            start = _GROUP_START[col]
            level_coef = np.array(
                [0.0 if lv not in levels else self.coef[start + levels.index(lv)] for lv in enum]
            )
            # design column per level, -1 for the reference level
            design_col = np.array(
                [-1 if lv not in levels else start + levels.index(lv) for lv in enum]
            )
            order = np.argsort(level_coef, kind="stable")
            self.groups.append((probs[order], level_coef[order], design_col[order]))

    def n_uniforms(self) -> int:
        return len(BINARY_FLAGS) + len(self.groups)

    def design(self, s: float, z_age: np.ndarray, u: np.ndarray) -> np.ndarray:
        n = len(z_age)
        X = np.zeros((n, N_COVARIATES))
        X[:, 0] = np.clip(self.age_mean + s * self.coef[0] * AGE_SD**2 + AGE_SD * z_age, 0.0, AGE_MAX)
        prev = expit(self.binary_logit + s * self.binary_coef)
        X[:, 1 : 1 + len(BINARY_FLAGS)] = u[:, : len(BINARY_FLAGS)] < prev
        for g, (probs, level_coef, design_col) in enumerate(self.groups):
            w = probs * np.exp(s * (level_coef - level_coef.max()))
            cdf = np.cumsum(w / w.sum())
            cdf[-1] = 1.0
            pick = np.searchsorted(cdf, u[:, len(BINARY_FLAGS) + g], side="right")
            cols = design_col[pick]
            hot = cols >= 0
            X[np.flatnonzero(hot), cols[hot]] = 1.0
        return X


@dataclass(frozen=True)
class SyntheticCohort:
    cohort: Cohort
    metadata: dict


def _hospital_rng(seed: int, index: int, attempt: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, attempt, stream])))


def _solve_tilt(model, intercept, target, z, u):
    def rate(s):
        X = model.design(s, z, u)
        return float(expit(intercept + X @ model.coef).mean())

    lo, hi = TILT_BRACKET
    r_lo, r_hi = rate(lo), rate(hi)
    if not r_lo <= target <= r_hi:
        return None
    best_s, best_err = lo, abs(r_lo - target)
    for _ in range(TILT_ITERATIONS):
        mid = 0.5 * (lo + hi)
        r_mid = rate(mid)
        err = abs(r_mid - target)
        if err < best_err:
            best_s, best_err = mid, err
        if r_mid < target:
            lo = mid
        else:
            hi = mid
    return best_s, best_err


def conditional_bernoulli(p: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    """Draw independent Bernoulli(p) outcomes conditioned on their sum being ``total``.

    Uses the exact sequential method: with ``R[j, r]`` the probability that
    rows ``j..n-1`` contribute ``r`` events, row ``j`` is an event with
    probability ``p_j R[j+1, r-1] / R[j, r]``. The risks are first shifted on
    the logit scale so their sum equals ``total``; the conditional law does not
    depend on that shift, and it keeps the recursion well scaled.
    """
    n = len(p)
    if total == 0:
        return np.zeros(n, dtype=np.int64)
    if total == n:
        return np.ones(n, dtype=np.int64)
    eta = logit(np.clip(p, 1e-12, 1 - 1e-12))
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(eta + mid).sum() < total:
            lo = mid
        else:
            hi = mid
    q = expit(eta + 0.5 * (lo + hi))
    R = np.zeros((n + 1, total + 1))
    R[n, 0] = 1.0
    for j in range(n - 1, -1, -1):
        R[j, 0] = R[j + 1, 0] * (1 - q[j])
        R[j, 1:] = R[j + 1, 1:] * (1 - q[j]) + R[j + 1, :-1] * q[j]
    out = np.zeros(n, dtype=np.int64)
    need = total
    draws = rng.random(n)
    for j in range(n):
        if need == 0:
            break
        prob = q[j] * R[j + 1, need - 1] / R[j, need]
        if draws[j] < prob:
            out[j] = 1
            need -= 1
    return out


def synthesize_cohort(
    targets: CalibrationTargets,
    intercept: float,
    coef,
    seed: int,
    max_attempts: int = 20,
) -> SyntheticCohort:
    """Generate a cohort whose per-hospital expected mortality matches the targets.

    For every hospital, covariates are drawn from the tilted factor model and
    the tilt is solved by bisection so that the realised mean model risk is
    within ``TILT_TOLERANCE_PP`` of the target. If the realised risk curve
    jumps over the target the covariate draw is repeated with a fresh stream
    (at most ``max_attempts`` times). Outcomes are Bernoulli from the logistic
    model, conditioned on the hospital's death count when the target has one.
    """
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (N_COVARIATES,):
        raise InputError(f"coefficient vector must have length {N_COVARIATES}")
    if not math.isfinite(intercept):
        raise InputError("intercept must be finite")
    model = CovariateModel(targets.prevalence_pct, coef)

    blocks, deaths, tilts, attempts, achieved = [], [], [], [], []
    for i, h in enumerate(targets.hospitals):
        target = h.expected_pct / 100.0
        for attempt in range(max_attempts):
            rng = _hospital_rng(seed, i, attempt, 0)
            z = rng.standard_normal(h.volume)
            u = rng.random((h.volume, model.n_uniforms()))
            solved = _solve_tilt(model, intercept, target, z, u)
            if solved is not None and solved[1] <= TILT_TOLERANCE_PP / 100.0:
                break
        else:
            raise UnattainableTarget(
                f"hospital {h.hospital_id!r}: expected rate {h.expected_pct}% not reachable"
            )
        s, _ = solved
        X = model.design(s, z, u)
        p = expit(intercept + X @ coef)
        out_rng = _hospital_rng(seed, i, attempt, 1)
        if h.deaths is None:
            y = (out_rng.random(h.volume) < p).astype(np.int64)
        else:
            y = conditional_bernoulli(p, h.deaths, out_rng)
        blocks.append(X)
        deaths.append(y)
        tilts.append(s)
        attempts.append(attempt + 1)
        achieved.append(100.0 * float(p.mean()))

    hosp = np.concatenate([np.full(h.volume, i, dtype=np.int64) for i, h in enumerate(targets.hospitals)])
    cohort = Cohort(
        tuple(h.hospital_id for h in targets.hospitals),
        hosp,
        np.concatenate(deaths),
        np.vstack(blocks),
    )
    metadata = {
        "seed": int(seed),
        "targets": targets.name,
        "intercept": float(intercept),
        "coefficients": dict(zip(COVARIATES, map(float, coef))),
        "tilt_shifts": dict(zip(cohort.hospital_ids, map(float, tilts))),
        "attempts": dict(zip(cohort.hospital_ids, attempts)),
        "achieved_expected_pct": dict(zip(cohort.hospital_ids, achieved)),
        "deaths_conditioned": [h.deaths is not None for h in targets.hospitals],
        "age_convention": {
            "distribution": "clip(Normal(mean, sd), 0, max)",
            "mean": model.age_mean,
            "sd": AGE_SD,
            "max": AGE_MAX,
        },
    }
    return SyntheticCohort(cohort, metadata)


def massachusetts_cohort(seed: int) -> SyntheticCohort:
    """Synthetic cohort calibrated to the shipped Massachusetts targets."""
    intercept, coef = load_coefficients()
    return synthesize_cohort(load_targets(), intercept, coef, seed)

"""Patient data model, PDC adherence labels, feature assembly and cohort I/O.

A cohort is stored as a list of :class:`Patient` objects, each carrying a
contiguous run of :class:`QuarterlyRecord` rows starting at quarter 1 (the
quarter containing the first fill).  Numerical code never walks these records
directly; it works on the dense :class:`CohortArrays` view, which is built once
per cohort and cached.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
DEFAULT_THRESHOLD = 0.8
DEFAULT_QUARTER_DAYS = 91
DEFAULT_PDC_LAGS = 8
DEFAULT_PDC_UNIT = 0.25
MIN_HISTORY_QUARTERS = 4

BIOMETRIC_BOUNDS = {
    "SBP": (60.0, 260.0),
    "LDL": (20.0, 400.0),
    "total_cholesterol": (60.0, 500.0),
}


class CohortError(ValueError):
    """Raised for malformed cohort data or invalid requests against it."""


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"


class Race(str, Enum):
    WHITE = "white"
    BLACK = "black"


class BiometricKind(str, Enum):
    SBP = "SBP"
    LDL = "LDL"
    TOTAL_CHOLESTEROL = "total_cholesterol"


@dataclass(frozen=True)
class DemographicProfile:
    sex: Sex
    race: Race
    smoker: bool
    age_years: float

    def __post_init__(self):
        if not self.age_years >= 0:
            raise CohortError(f"age_years must be >= 0, got {self.age_years}")


@dataclass(frozen=True)
class ClaimRecord:
    patient_id: str
    fill_date: dt.date
    days_supply: int

    def __post_init__(self):
        if not 0 < self.days_supply <= 365:
            raise CohortError(f"days_supply must be in (0, 365], got {self.days_supply}")


@dataclass(frozen=True)
class BiometricRecord:
    patient_id: str
    date: dt.date
    kind: BiometricKind
    value: float

    def __post_init__(self):
        lo, hi = BIOMETRIC_BOUNDS[BiometricKind(self.kind).value]
        if not lo <= self.value <= hi:
            raise CohortError(
                f"{BiometricKind(self.kind).value} value {self.value} outside plausible range [{lo}, {hi}]"
            )


@dataclass(frozen=True, slots=True)
class QuarterlyRecord:
    """One quarter of observed data.

    Biometric fields hold the mean of the measurements taken during the
    quarter, or ``None`` when nothing was measured.  Test counts are
    cumulative from quarter 1 through the end of this quarter.
    """

    quarter_index: int
    pdc: float
    adherent: bool
    sbp: float | None
    ldl: float | None
    total_cholesterol: float | None
    n_bp_tests_cum: int
    n_chol_tests_cum: int


@dataclass
class Patient:
    id: str
    demographics: DemographicProfile
    baseline_cvd_risk: float
    random_effect: float
    quarters: list[QuarterlyRecord]
    # Yearly background multipliers on 10-year CVD risk over the decision
    # horizon, excluding the adherence effect.
    risk_growth: tuple[float, ...] = ()

    def validate(self, threshold: float) -> None:
        if not 0.0 <= self.baseline_cvd_risk <= 1.0:
            raise CohortError(f"patient {self.id}: baseline_cvd_risk {self.baseline_cvd_risk} not in [0, 1]")
        if len(self.quarters) < MIN_HISTORY_QUARTERS:
            raise CohortError(
                f"patient {self.id}: needs at least {MIN_HISTORY_QUARTERS} quarters of history, "
                f"has {len(self.quarters)}"
            )
        prev_bp = prev_chol = 0
        for k, rec in enumerate(self.quarters, start=1):
            if rec.quarter_index != k:
                raise CohortError(f"patient {self.id}: quarter {rec.quarter_index} found at position {k}")
            if not 0.0 <= rec.pdc <= 1.0:
                raise CohortError(f"patient {self.id} quarter {k}: pdc {rec.pdc} not in [0, 1]")
            if rec.adherent != (rec.pdc >= threshold):
                raise CohortError(f"patient {self.id} quarter {k}: adherent flag disagrees with pdc")
            if rec.n_bp_tests_cum < prev_bp or rec.n_chol_tests_cum < prev_chol:
                raise CohortError(f"patient {self.id} quarter {k}: cumulative test counts decreased")
            prev_bp, prev_chol = rec.n_bp_tests_cum, rec.n_chol_tests_cum


@dataclass
class Cohort:
    patients: list[Patient]
    adherence_threshold: float = DEFAULT_THRESHOLD
    quarter_length_days: int = DEFAULT_QUARTER_DAYS
    # First quarter of the decision horizon (epoch 1) when the cohort was
    # built for simulation; ``None`` for plain ingested data.
    origin_quarter: int | None = None

    def __post_init__(self):
        _check_threshold(self.adherence_threshold)
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CohortError("patient ids must be unique")

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.adherence_threshold == other.adherence_threshold
            and self.quarter_length_days == other.quarter_length_days
            and self.origin_quarter == other.origin_quarter
            and self.patients == other.patients
        )

    def __len__(self):
        return len(self.patients)

    def validate(self) -> None:
        for p in self.patients:
            p.validate(self.adherence_threshold)

    @cached_property
    def arrays(self) -> "CohortArrays":
        return CohortArrays.from_cohort(self)

    def subset(self, indices: Sequence[int]) -> "Cohort":
        return Cohort(
            [self.patients[i] for i in indices],
            self.adherence_threshold,
            self.quarter_length_days,
            self.origin_quarter,
        )


# ---------------------------------------------------------------------------
# PDC and adherence labels


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold <= 1.0:
        raise CohortError(f"adherence threshold must be in (0, 1], got {threshold}")


def compute_pdc(claims: Sequence[ClaimRecord], quarter_start: dt.date, quarter_end: dt.date) -> float:
    """Proportion of days in ``[quarter_start, quarter_end)`` with supply on hand.

    Supply from overlapping fills is stockpiled: a refill that arrives while
    the previous supply is still running starts when that supply runs out.
    """
    if quarter_end <= quarter_start:
        raise CohortError("quarter_end must be after quarter_start")
    for a, b in zip(claims, claims[1:]):
        if b.fill_date < a.fill_date:
            raise CohortError("claims must be sorted by fill_date")
    total = (quarter_end - quarter_start).days
    covered = 0
    supply_end: dt.date | None = None
    for claim in claims:
        start = claim.fill_date if supply_end is None else max(claim.fill_date, supply_end)
        end = start + dt.timedelta(days=claim.days_supply)
        supply_end = end
        lo, hi = max(start, quarter_start), min(end, quarter_end)
        if hi > lo:
            covered += (hi - lo).days
        if start >= quarter_end:
            break
    return min(1.0, covered / total)


def label_adherence_quarter(pdc: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    """True when the quarter is adherent (``pdc >= threshold``)."""
    _check_threshold(threshold)
    return pdc >= threshold


def label_adherence_year(quarter_flags: Sequence[bool]) -> bool:
    """True when the year is adherent: fewer than two non-adherent quarters."""
    if len(quarter_flags) != 4:
        raise CohortError(f"a year needs exactly 4 quarterly flags, got {len(quarter_flags)}")
    return sum(1 for f in quarter_flags if not f) < 2


def yearly_nonadherence(adherent: np.ndarray) -> np.ndarray:
    """Vectorised non-adherent-year labels from a ``(..., 4 * years)`` flag array."""
    adherent = np.asarray(adherent, dtype=bool)
    if adherent.shape[-1] % 4:
        raise CohortError("quarter axis must be a multiple of 4")
    blocks = adherent.reshape(*adherent.shape[:-1], -1, 4)
    return (~blocks).sum(axis=-1) >= 2


# ---------------------------------------------------------------------------
# Features


COVARIATES = (
    "intercept",
    "sex",
    "race",
    "smoker",
    "age",
    "sbp",
    "n_bp_tests",
    "ldl",
    "total_cholesterol",
    "n_chol_tests",
)


@dataclass(frozen=True)
class FeatureLayout:
    """Covariate ordering and encoding.

    Binary covariates are coded male=1, white=1, smoker=1.  Age is in years
    at the start of the quarter, biometrics in clinical units, test counts are
    cumulative.  PDC lags are expressed in units of ``pdc_unit`` and ordered
    most recent first.
    """

    pdc_lags: int = DEFAULT_PDC_LAGS
    pdc_unit: float = DEFAULT_PDC_UNIT

    def __post_init__(self):
        if self.pdc_lags < 0:
            raise CohortError("pdc_lags must be >= 0")
        if not self.pdc_unit > 0:
            raise CohortError("pdc_unit must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        return COVARIATES + tuple(f"pdc_lag_{k}" for k in range(1, self.pdc_lags + 1))

    @property
    def size(self) -> int:
        return len(COVARIATES) + self.pdc_lags

    def to_dict(self) -> dict:
        return {"names": list(self.names), "pdc_lags": self.pdc_lags, "pdc_unit": self.pdc_unit}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        layout = cls(int(d["pdc_lags"]), float(d["pdc_unit"]))
        if "names" in d and list(d["names"]) != list(layout.names):
            raise CohortError("feature layout names do not match the expected ordering")
        return layout


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        if self.values.shape != (self.layout.size,):
            raise CohortError(f"feature vector length {self.values.shape} does not match layout {self.layout.size}")
        if self.values[0] != 1.0:
            raise CohortError("first feature must be the intercept (1.0)")


def _locf(values: np.ndarray) -> np.ndarray:
    """Carry the last finite value forward along the last axis."""
    out = values.copy()
    n, q = out.shape
    idx = np.where(np.isfinite(out), np.arange(q), -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    rows = np.arange(n)[:, None]
    filled = out[rows, np.maximum(idx, 0)]
    filled[idx < 0] = np.nan
    return filled


@dataclass
class CohortArrays:
    """Dense ``(patients, quarters)`` view of a cohort.

    Quarter ``k`` (1-based) lives in column ``k - 1``.  ``length[i]`` is the
    number of observed quarters for patient ``i``; columns beyond it are NaN
    (floats) or zero (counts).
    """

    ids: list[str]
    sex: np.ndarray
    race: np.ndarray
    smoker: np.ndarray
    age0: np.ndarray
    risk: np.ndarray
    length: np.ndarray
    pdc: np.ndarray
    adherent: np.ndarray
    sbp: np.ndarray
    ldl: np.ndarray
    tc: np.ndarray
    n_bp: np.ndarray
    n_chol: np.ndarray
    sbp_locf: np.ndarray = field(init=False)
    ldl_locf: np.ndarray = field(init=False)
    tc_locf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sbp_locf = _locf(self.sbp)
        self.ldl_locf = _locf(self.ldl)
        self.tc_locf = _locf(self.tc)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_quarters(self) -> int:
        return self.pdc.shape[1]

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "CohortArrays":
        n = len(cohort.patients)
        q = max((len(p.quarters) for p in cohort.patients), default=0)
        pdc = np.full((n, q), np.nan)
        adherent = np.zeros((n, q), dtype=bool)
        sbp, ldl, tc = (np.full((n, q), np.nan) for _ in range(3))
        n_bp = np.zeros((n, q))
        n_chol = np.zeros((n, q))
        length = np.zeros(n, dtype=int)
        for i, p in enumerate(cohort.patients):
            length[i] = len(p.quarters)
            for j, r in enumerate(p.quarters):
                pdc[i, j] = r.pdc
                adherent[i, j] = r.adherent
                sbp[i, j] = np.nan if r.sbp is None else r.sbp
                ldl[i, j] = np.nan if r.ldl is None else r.ldl
                tc[i, j] = np.nan if r.total_cholesterol is None else r.total_cholesterol
                n_bp[i, j] = r.n_bp_tests_cum
                n_chol[i, j] = r.n_chol_tests_cum
        pats = cohort.patients
        return cls(
            ids=[p.id for p in pats],
            sex=np.array([p.demographics.sex == Sex.MALE for p in pats], dtype=float),
            race=np.array([p.demographics.race == Race.WHITE for p in pats], dtype=float),
            smoker=np.array([p.demographics.smoker for p in pats], dtype=float),
            age0=np.array([p.demographics.age_years for p in pats], dtype=float),
            risk=np.array([p.baseline_cvd_risk for p in pats], dtype=float),
            length=length,
            pdc=pdc,
            adherent=adherent,
            sbp=sbp,
            ldl=ldl,
            tc=tc,
            n_bp=n_bp,
            n_chol=n_chol,
        )

    def features_at(self, quarter: int, layout: FeatureLayout, rows=None) -> np.ndarray:
        """Design rows for forecasting ``quarter`` from data in quarters ``< quarter``.

        Returns an array of shape ``(len(rows), layout.size)``; rows whose
        inputs are missing contain NaN.
        """
        rows = np.arange(self.n) if rows is None else np.asarray(rows)
        if quarter <= layout.pdc_lags or quarter < 2:
            raise CohortError(
                f"forecasting quarter {quarter} needs at least {max(layout.pdc_lags, 1)} prior quarters"
            )
        prev = quarter - 2  # column of quarter - 1
        x = np.empty((len(rows), layout.size))
        x[:, 0] = 1.0
        x[:, 1] = self.sex[rows]
        x[:, 2] = self.race[rows]
        x[:, 3] = self.smoker[rows]
        x[:, 4] = self.age0[rows] + (quarter - 1) / 4.0
        x[:, 5] = self.sbp_locf[rows, prev]
        x[:, 6] = self.n_bp[rows, prev]
        x[:, 7] = self.ldl_locf[rows, prev]
        x[:, 8] = self.tc_locf[rows, prev]
        x[:, 9] = self.n_chol[rows, prev]
        for lag in range(1, layout.pdc_lags + 1):
            x[:, 9 + lag] = self.pdc[rows, quarter - 1 - lag] / layout.pdc_unit
        x[self.length[rows] < quarter - 1] = np.nan
        return x


def build_feature_vector(
    patient: Patient, at_quarter: int, pdc_lags: int = DEFAULT_PDC_LAGS, pdc_unit: float = DEFAULT_PDC_UNIT
) -> FeatureVector:
    """Covariates for forecasting ``at_quarter`` using data from earlier quarters only."""
    layout = FeatureLayout(pdc_lags, pdc_unit)
    if at_quarter <= pdc_lags or at_quarter < 2:
        raise CohortError(
            f"at_quarter={at_quarter} needs at least {max(pdc_lags, 1)} prior quarters "
            f"(minimum at_quarter is {max(pdc_lags, 1) + 1})"
        )
    if len(patient.quarters) < at_quarter - 1:
        raise CohortError(
            f"patient {patient.id} has {len(patient.quarters)} quarters; "
            f"at_quarter={at_quarter} needs history through quarter {at_quarter - 1}"
        )
    hist = patient.quarters[: at_quarter - 1]

    def last(attr: str) -> float:
        for rec in reversed(hist):
            v = getattr(rec, attr)
            if v is not None:
                return v
        raise CohortError(f"patient {patient.id} has no {attr} measurement before quarter {at_quarter}")

    d = patient.demographics
    prev = hist[-1]
    values = [
        1.0,
        float(d.sex == Sex.MALE),
        float(d.race == Race.WHITE),
        float(d.smoker),
        d.age_years + (at_quarter - 1) / 4.0,
        last("sbp"),
        float(prev.n_bp_tests_cum),
        last("ldl"),
        last("total_cholesterol"),
        float(prev.n_chol_tests_cum),
    ]
    values += [hist[-lag].pdc / pdc_unit for lag in range(1, pdc_lags + 1)]
    return FeatureVector(np.array(values, dtype=float), layout)


def observed_risk_path(patient: Patient, yearly_adherent: Sequence[bool], r: float) -> np.ndarray:
    """10-year CVD risk at the start of each horizon year and at its end.

    Each year multiplies risk by the patient's background growth factor and,
    when the year is adherent, by ``1 - r``.
    """
    if len(yearly_adherent) > len(patient.risk_growth):
        raise CohortError(f"patient {patient.id}: risk growth covers only {len(patient.risk_growth)} years")
    path = [patient.baseline_cvd_risk]
    for g, adh in zip(patient.risk_growth, yearly_adherent):
        path.append(min(1.0, path[-1] * g * ((1.0 - r) if adh else 1.0)))
    return np.array(path)


# ---------------------------------------------------------------------------
# Claims / biometrics ingestion


def _parse_date(text: str, what: str, row: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as e:
        raise CohortError(f"row {row}: invalid {what} {text!r}") from e


def _read_rows(path: Path, header: Sequence[str]) -> list[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if [h.strip() for h in reader.fieldnames] != list(header):
            raise CohortError(f"{path}: expected header {','.join(header)}, got {','.join(reader.fieldnames)}")
        # Row numbers count the header as row 1.
        return [(i, row) for i, row in enumerate(reader, start=2)]


def read_claims_csv(path) -> list[ClaimRecord]:
    out = []
    for row, rec in _read_rows(Path(path), ("patient_id", "fill_date", "days_supply")):
        try:
            supply = int(rec["days_supply"])
        except (TypeError, ValueError) as e:
            raise CohortError(f"row {row}: days_supply {rec['days_supply']!r} is not an integer") from e
        try:
            out.append(ClaimRecord(rec["patient_id"].strip(), _parse_date(rec["fill_date"], "fill_date", row), supply))
        except CohortError as e:
            if str(e).startswith("row "):
                raise
            raise CohortError(f"row {row}: {e}") from e
    return out


def read_biometrics_csv(path) -> list[BiometricRecord]:
    out = []
    for row, rec in _read_rows(Path(path), ("patient_id", "date", "kind", "value")):
        try:
            kind = BiometricKind(rec["kind"].strip())
            value = float(rec["value"])
            out.append(BiometricRecord(rec["patient_id"].strip(), _parse_date(rec["date"], "date", row), kind, value))
        except (ValueError, TypeError) as e:
            if str(e).startswith("row "):
                raise
            raise CohortError(f"row {row}: {e}") from e
    return out


DEMOGRAPHICS_HEADER = ("patient_id", "sex", "race", "smoker", "age_years", "baseline_cvd_risk")


def read_demographics_csv(path) -> dict[str, tuple[DemographicProfile, float]]:
    out = {}
    for row, rec in _read_rows(Path(path), DEMOGRAPHICS_HEADER):
        try:
            smoker = rec["smoker"].strip().lower()
            if smoker not in ("0", "1", "true", "false"):
                raise ValueError(f"smoker {rec['smoker']!r} is not boolean")
            prof = DemographicProfile(
                Sex(rec["sex"].strip()), Race(rec["race"].strip()), smoker in ("1", "true"), float(rec["age_years"])
            )
            out[rec["patient_id"].strip()] = (prof, float(rec["baseline_cvd_risk"]))
        except (ValueError, TypeError) as e:
            raise CohortError(f"row {row}: {e}") from e
    return out


def cohort_from_records(
    claims: Iterable[ClaimRecord],
    biometrics: Iterable[BiometricRecord],
    demographics: dict[str, tuple[DemographicProfile, float]],
    study_end: dt.date | None = None,
    adherence_threshold: float = DEFAULT_THRESHOLD,
    quarter_length_days: int = DEFAULT_QUARTER_DAYS,
) -> Cohort:
    """Build quarterly records from raw claims and biometrics.

    Quarters are anchored at each patient's first fill; only complete
    quarters before ``study_end`` (default: the latest date seen) are kept.
    Patients with fewer than four complete quarters are dropped.
    """
    _check_threshold(adherence_threshold)
    claims = sorted(claims, key=lambda c: (c.patient_id, c.fill_date))
    biometrics = list(biometrics)
    by_patient: dict[str, list[ClaimRecord]] = {}
    for c in claims:
        by_patient.setdefault(c.patient_id, []).append(c)
    bio_by_patient: dict[str, list[BiometricRecord]] = {}
    for b in biometrics:
        bio_by_patient.setdefault(b.patient_id, []).append(b)
    if study_end is None:
        dates = [c.fill_date for c in claims] + [b.date for b in biometrics]
        study_end = max(dates) + dt.timedelta(days=1) if dates else dt.date.min
    step = dt.timedelta(days=quarter_length_days)
    patients = []
    for pid in sorted(by_patient):
        if pid not in demographics:
            raise CohortError(f"patient {pid} has claims but no demographics row")
        pc = by_patient[pid]
        anchor = pc[0].fill_date
        n_q = (study_end - anchor).days // quarter_length_days
        if n_q < MIN_HISTORY_QUARTERS:
            continue
        bios = bio_by_patient.get(pid, [])
        records = []
        n_bp = n_chol = 0
        for k in range(1, n_q + 1):
            qs, qe = anchor + (k - 1) * step, anchor + k * step
            pdc = compute_pdc(pc, qs, qe)
            vals: dict[BiometricKind, list[float]] = {kind: [] for kind in BiometricKind}
            for b in bios:
                if qs <= b.date < qe:
                    vals[BiometricKind(b.kind)].append(b.value)
            n_bp += len(vals[BiometricKind.SBP])
            n_chol += len(vals[BiometricKind.LDL])

            def mean(v):
                return float(np.mean(v)) if v else None

            records.append(
                QuarterlyRecord(
                    k,
                    pdc,
                    pdc >= adherence_threshold,
                    mean(vals[BiometricKind.SBP]),
                    mean(vals[BiometricKind.LDL]),
                    mean(vals[BiometricKind.TOTAL_CHOLESTEROL]),
                    n_bp,
                    n_chol,
                )
            )
        prof, risk = demographics[pid]
        patients.append(Patient(pid, prof, risk, 0.0, records))
    cohort = Cohort(patients, adherence_threshold, quarter_length_days)
    cohort.validate()
    return cohort


# ---------------------------------------------------------------------------
# JSON cohort document

_QUARTER_FIELDS = ("pdc", "sbp", "ldl", "total_cholesterol", "n_bp_tests_cum", "n_chol_tests_cum")


def cohort_to_dict(cohort: Cohort) -> dict:
    patients = []
    for p in cohort.patients:
        q = p.quarters
        patients.append(
            {
                "id": p.id,
                "demographics": {
                    "sex": p.demographics.sex.value,
                    "race": p.demographics.race.value,
                    "smoker": p.demographics.smoker,
                    "age_years": p.demographics.age_years,
                },
                "baseline_cvd_risk": p.baseline_cvd_risk,
                "random_effect": p.random_effect,
                "risk_growth": list(p.risk_growth),
                "quarters": {f: [getattr(r, f) for r in q] for f in _QUARTER_FIELDS},
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "adherence_threshold": cohort.adherence_threshold,
        "quarter_length_days": cohort.quarter_length_days,
        "origin_quarter": cohort.origin_quarter,
        "patients": patients,
    }


def cohort_from_dict(doc: dict) -> Cohort:
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise CohortError(f"unsupported cohort schema_version {doc.get('schema_version') if isinstance(doc, dict) else None!r}")
    expected = {"schema_version", "adherence_threshold", "quarter_length_days", "origin_quarter", "patients"}
    if set(doc) != expected:
        raise CohortError(f"cohort document keys {sorted(doc)} do not match schema {sorted(expected)}")
    threshold = float(doc["adherence_threshold"])
    _check_threshold(threshold)
    patients = []
    for row, d in enumerate(doc["patients"]):
        try:
            dem = d["demographics"]
            prof = DemographicProfile(Sex(dem["sex"]), Race(dem["race"]), bool(dem["smoker"]), float(dem["age_years"]))
            cols = d["quarters"]
            n_q = len(cols["pdc"])
            if any(len(cols[f]) != n_q for f in _QUARTER_FIELDS):
                raise CohortError("quarter columns have unequal lengths")
            quarters = [
                QuarterlyRecord(
                    k + 1,
                    cols["pdc"][k],
                    cols["pdc"][k] >= threshold,
                    cols["sbp"][k],
                    cols["ldl"][k],
                    cols["total_cholesterol"][k],
                    cols["n_bp_tests_cum"][k],
                    cols["n_chol_tests_cum"][k],
                )
                for k in range(n_q)
            ]
            p = Patient(
                str(d["id"]),
                prof,
                d["baseline_cvd_risk"],
                d["random_effect"],
                quarters,
                tuple(d["risk_growth"]),
            )
            p.validate(threshold)
        except (KeyError, TypeError, ValueError) as e:
            raise CohortError(f"patient row {row}: {e}") from e
        patients.append(p)
    return Cohort(patients, threshold, int(doc["quarter_length_days"]), doc["origin_quarter"])


def save_cohort(cohort: Cohort, path) -> None:
    with open(path, "w") as fh:
        json.dump(cohort_to_dict(cohort), fh, separators=(",", ":"), allow_nan=False)
        fh.write("\n")


def load_cohort(path, biometrics_path=None, demographics_path=None) -> Cohort:
    """Load a cohort JSON document, or ingest a claims CSV.

    A ``.csv`` path is read as a claims file; biometrics and demographics
    CSVs may accompany it.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        claims = read_claims_csv(path)
        bios = read_biometrics_csv(biometrics_path) if biometrics_path else []
        dem = read_demographics_csv(demographics_path) if demographics_path else {}
        return cohort_from_records(claims, bios, dem)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CohortError(f"{path}: not valid JSON ({e})") from e
    return cohort_from_dict(doc)

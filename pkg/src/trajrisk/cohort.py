"""Cohort ingestion and vital-sign preprocessing.

Raw readings are grouped into tumbling windows anchored at ICU admission,
missing windows are filled with the patient's stay mean, and features are
scaled with cohort-level statistics. The same steps are re-run on truncated
stays for the horizon analysis.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FEATURES = (
    "respiration_rate",
    "oxygen_saturation",
    "temperature",
    "systolic_bp",
    "heart_rate",
    "gcs_eye",
    "gcs_verbal",
    "gcs_motor",
)
ZSCORE_FEATURES = frozenset({"temperature", "systolic_bp", "respiration_rate", "gcs_eye"})
MINMAX_FEATURES = frozenset(FEATURES) - ZSCORE_FEATURES
HORIZONS = (4.0, 24.0, 72.0, 168.0, math.inf)

UNKNOWN_CLASS = "UNKNOWN"
NO_CLASS = "NONE"

PATIENT_COLUMNS = [
    "patient_id", "age", "gender", "first_careunit", "last_careunit",
    "admission_type", "admission_location", "admit_time", "discharge_time",
    "died_in_hospital",
]
VITAL_COLUMNS = ["patient_id", "t_minutes", "feature", "value"]
DIAGNOSIS_COLUMNS = ["patient_id", "icd_code", "icd_version"]


class CohortError(ValueError):
    """Raised for malformed cohort input or degenerate preprocessing input."""


@dataclass
class PatientRecord:
    patient_id: str
    age: float
    gender: str
    first_careunit: str
    last_careunit: str
    admission_type: str
    admission_location: str
    admit_time: pd.Timestamp
    discharge_time: pd.Timestamp
    died_in_hospital: bool
    icd_codes: list[tuple[str, str]] = field(default_factory=list)
    # filled by assign_icd_classes
    icd_classes: list[str] | None = None

    @property
    def length_of_stay_days(self) -> float:
        return (self.discharge_time - self.admit_time).total_seconds() / 86400.0


@dataclass
class VitalTrajectory:
    """One patient's windowed series for all eight vitals.

    ``values`` has one row per window in ``windows`` and one column per entry
    of ``FEATURES``; NaN marks a feature with no reading in that window.
    """

    patient_id: str
    windows: np.ndarray
    values: np.ndarray

    def feature(self, name: str) -> np.ndarray:
        return self.values[:, FEATURES.index(name)]

    def __len__(self) -> int:
        return len(self.windows)


@dataclass(frozen=True)
class StaticFeatureVector:
    age: float
    gender: str
    first_careunit: str
    last_careunit: str | None
    admission_type: str
    admission_location: str
    length_of_stay_days: float | None
    top_icd_class: str
    second_icd_class: str
    n_unique_icd: int
    vital_means: tuple[float, ...]

    def as_dict(self) -> dict:
        """Flat feature mapping; fields absent for a truncated horizon are omitted."""
        out = {
            "age": self.age,
            "gender": self.gender,
            "first_careunit": self.first_careunit,
            "admission_type": self.admission_type,
            "admission_location": self.admission_location,
            "top_icd_class": self.top_icd_class,
            "second_icd_class": self.second_icd_class,
            "n_unique_icd": float(self.n_unique_icd),
        }
        if self.last_careunit is not None:
            out["last_careunit"] = self.last_careunit
        if self.length_of_stay_days is not None:
            out["length_of_stay_days"] = self.length_of_stay_days
        for name, value in zip(FEATURES, self.vital_means):
            out[f"mean_{name}"] = value
        return out


# ---------------------------------------------------------------------------
# ingestion


def _read_csv(path, columns: list[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise CohortError(f"{what}: empty file {path}") from None
    except pd.errors.ParserError as exc:
        raise CohortError(f"{what}: malformed row ({exc})") from None
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise CohortError(f"{what}: missing columns {missing}")
    return frame[columns]


def _bad_line(frame: pd.DataFrame, mask, what: str, reason: str) -> None:
    mask = np.asarray(mask)
    if mask.any():
        # header is line 1
        line = int(np.flatnonzero(mask)[0]) + 2
        raise CohortError(f"{what}: line {line}: {reason}")


def ingest_cohort(patients_path, vitals_path, diagnoses_path):
    """Load the three cohort CSV files.

    Returns ``(records, readings)`` where ``records`` maps patient_id to a
    :class:`PatientRecord` (file order preserved) and ``readings`` is a frame
    with columns ``patient_id, t_minutes, feature, value``.
    """
    patients = _read_csv(patients_path, PATIENT_COLUMNS, "patients.csv")
    vitals = _read_csv(vitals_path, VITAL_COLUMNS, "vitals.csv")
    diagnoses = _read_csv(diagnoses_path, DIAGNOSIS_COLUMNS, "diagnoses.csv")

    if patients.empty:
        raise CohortError("patients.csv: no patients")
    if vitals.empty:
        raise CohortError("vitals.csv: no readings")

    _bad_line(patients, patients["patient_id"] == "", "patients.csv", "empty patient_id")
    dup = patients["patient_id"].duplicated().to_numpy()
    _bad_line(patients, dup, "patients.csv", "duplicate patient_id")
    age = pd.to_numeric(patients["age"], errors="coerce")
    _bad_line(patients, age.isna() | (age < 0), "patients.csv", "invalid age")
    admit = pd.to_datetime(patients["admit_time"], errors="coerce", format="ISO8601")
    discharge = pd.to_datetime(patients["discharge_time"], errors="coerce", format="ISO8601")
    _bad_line(patients, admit.isna() | discharge.isna(), "patients.csv", "invalid timestamp")
    _bad_line(patients, discharge < admit, "patients.csv", "discharge_time before admit_time")
    died = patients["died_in_hospital"]
    _bad_line(patients, ~died.isin(["0", "1"]), "patients.csv", "died_in_hospital must be 0 or 1")

    known = set(patients["patient_id"])

    t = pd.to_numeric(vitals["t_minutes"], errors="coerce")
    value = pd.to_numeric(vitals["value"], errors="coerce")
    _bad_line(vitals, t.isna() | ~np.isfinite(t) | (t < 0), "vitals.csv", "t_minutes must be a number >= 0")
    _bad_line(vitals, value.isna() | ~np.isfinite(value), "vitals.csv", "value must be finite")
    _bad_line(vitals, ~vitals["feature"].isin(FEATURES), "vitals.csv", "unknown feature")
    _bad_line(vitals, ~vitals["patient_id"].isin(known), "vitals.csv", "reading references unknown patient")

    _bad_line(diagnoses, ~diagnoses["patient_id"].isin(known), "diagnoses.csv", "diagnosis references unknown patient")
    _bad_line(diagnoses, ~diagnoses["icd_version"].isin(["9", "10"]), "diagnoses.csv", "icd_version must be 9 or 10")
    _bad_line(diagnoses, diagnoses["icd_code"] == "", "diagnoses.csv", "empty icd_code")

    codes: dict[str, list[tuple[str, str]]] = {pid: [] for pid in patients["patient_id"]}
    for pid, code, version in diagnoses.itertuples(index=False):
        codes[pid].append((code.strip(), "ICD9" if version == "9" else "ICD10"))

    records = {}
    for i, row in enumerate(patients.itertuples(index=False)):
        records[row.patient_id] = PatientRecord(
            patient_id=row.patient_id,
            age=float(age.iloc[i]),
            gender=row.gender,
            first_careunit=row.first_careunit,
            last_careunit=row.last_careunit,
            admission_type=row.admission_type,
            admission_location=row.admission_location,
            admit_time=admit.iloc[i],
            discharge_time=discharge.iloc[i],
            died_in_hospital=died.iloc[i] == "1",
            icd_codes=codes[row.patient_id],
        )

    readings = pd.DataFrame({
        "patient_id": vitals["patient_id"].to_numpy(),
        "t_minutes": t.to_numpy(dtype=float),
        "feature": vitals["feature"].to_numpy(),
        "value": value.to_numpy(dtype=float),
    })
    logger.info(
        "ingested %d patients, %d readings, %d diagnosis rows",
        len(records), len(readings), len(diagnoses),
    )
    return records, readings


def cohort_summary(records: Mapping[str, PatientRecord], readings: pd.DataFrame) -> dict:
    n = len(records)
    deaths = sum(r.died_in_hospital for r in records.values())
    return {
        "n_patients": n,
        "n_readings": int(len(readings)),
        "mortality_rate": deaths / n if n else float("nan"),
    }


# ---------------------------------------------------------------------------
# grouping, imputation, scaling


def group_observations(readings: pd.DataFrame, window_minutes: float = 30) -> dict[str, VitalTrajectory]:
    """Average readings into tumbling windows ``[i*w, (i+1)*w)`` from admission.

    A window exists for a patient when any feature has a reading in it; the
    other features of that window are NaN.
    """
    if window_minutes <= 0:
        raise CohortError("window_minutes must be positive")
    if len(readings) == 0:
        return {}
    frame = pd.DataFrame({
        "patient_id": readings["patient_id"].to_numpy(),
        "window": np.floor(readings["t_minutes"].to_numpy(dtype=float) / window_minutes).astype(np.int64),
        "feature": pd.Categorical(readings["feature"], categories=FEATURES),
        "value": readings["value"].to_numpy(dtype=float),
    })
    means = frame.groupby(["patient_id", "window", "feature"], observed=True, sort=True)["value"].mean()
    table = means.unstack("feature").reindex(columns=list(FEATURES))

    out = {}
    pids = table.index.get_level_values(0)
    windows = table.index.get_level_values(1).to_numpy()
    values = table.to_numpy(dtype=float)
    bounds = np.flatnonzero(np.r_[True, pids[1:] != pids[:-1], True])
    for start, stop in zip(bounds[:-1], bounds[1:]):
        pid = pids[start]
        out[pid] = VitalTrajectory(pid, windows[start:stop].copy(), values[start:stop].copy())
    return out


def impute_missing(trajectories: Mapping[str, VitalTrajectory]) -> dict[str, VitalTrajectory]:
    """Fill missing windows with the patient's mean of that feature over the stay."""
    out = {}
    for pid, traj in trajectories.items():
        values = traj.values.copy()
        missing = np.isnan(values)
        if missing.any():
            observed = ~missing
            counts = observed.sum(axis=0)
            empty = np.flatnonzero(counts == 0)
            if len(empty):
                raise CohortError(f"patient {pid}: feature {FEATURES[empty[0]]} never observed")
            means = np.where(observed, values, 0.0).sum(axis=0) / counts
            values[missing] = np.broadcast_to(means, values.shape)[missing]
        out[pid] = VitalTrajectory(pid, traj.windows.copy(), values)
    return out


@dataclass(frozen=True)
class ScalerState:
    """Cohort statistics: ``scaled = (value - offset) / scale`` per feature."""

    methods: tuple[str, ...]
    offset: tuple[float, ...]
    scale: tuple[float, ...]

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - np.asarray(self.offset)) / np.asarray(self.scale)

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return values * np.asarray(self.scale) + np.asarray(self.offset)

    def as_dict(self) -> dict:
        return {
            name: {"method": m, "offset": o, "scale": s}
            for name, m, o, s in zip(FEATURES, self.methods, self.offset, self.scale)
        }


def fit_scaler(trajectories: Mapping[str, VitalTrajectory],
               zscore_features: Iterable[str] = ZSCORE_FEATURES) -> ScalerState:
    """Population z-score for ``zscore_features``, min-max for the rest."""
    zscore_features = frozenset(zscore_features)
    stacked = np.vstack([t.values for t in trajectories.values()])
    if np.isnan(stacked).any():
        raise CohortError("scaling requires imputed trajectories")
    methods, offset, scale = [], [], []
    for k, name in enumerate(FEATURES):
        col = stacked[:, k]
        if name in zscore_features:
            sd = float(col.std())
            if not sd > 0:
                raise CohortError(f"feature {name} has zero variance")
            methods.append("zscore")
            offset.append(float(col.mean()))
            scale.append(sd)
        else:
            lo, hi = float(col.min()), float(col.max())
            if not hi > lo:
                raise CohortError(f"feature {name} is constant (min == max)")
            methods.append("minmax")
            offset.append(lo)
            scale.append(hi - lo)
    return ScalerState(tuple(methods), tuple(offset), tuple(scale))


def scale_features(trajectories: Mapping[str, VitalTrajectory], state: ScalerState | None = None,
                   zscore_features: Iterable[str] = ZSCORE_FEATURES):
    """Scale complete trajectories; returns ``(scaled, state)``.

    Statistics are fitted on ``trajectories`` unless ``state`` is given.
    """
    if not trajectories:
        raise CohortError("no trajectories to scale")
    if state is None:
        state = fit_scaler(trajectories, zscore_features)
    scaled = {
        pid: VitalTrajectory(pid, t.windows.copy(), state.transform(t.values))
        for pid, t in trajectories.items()
    }
    return scaled, state


# ---------------------------------------------------------------------------
# ICD mapping

_ICD9_CHAPTERS = [
    (1, 139, "001-139 infectious"),
    (140, 239, "140-239 neoplasms"),
    (240, 279, "240-279 endocrine"),
    (280, 289, "280-289 blood"),
    (290, 319, "290-319 mental"),
    (320, 389, "320-389 nervous"),
    (390, 459, "390-459 circulatory"),
    (460, 519, "460-519 respiratory"),
    (520, 579, "520-579 digestive"),
    (580, 629, "580-629 genitourinary"),
    (630, 679, "630-679 pregnancy"),
    (680, 709, "680-709 skin"),
    (710, 739, "710-739 musculoskeletal"),
    (740, 759, "740-759 congenital"),
    (760, 779, "760-779 perinatal"),
    (780, 799, "780-799 symptoms"),
    (800, 999, "800-999 injury"),
]
ICD9_E_CLASS = "E external causes"
ICD9_V_CLASS = "V supplementary"
ICD9_CLASSES = tuple(c for _, _, c in _ICD9_CHAPTERS) + (ICD9_E_CLASS, ICD9_V_CLASS)


class GemTable:
    """ICD-10 to ICD-9 backward mapping loaded from a GEM text file.

    When a code has several rows the first one in file order wins.
    """

    def __init__(self, mapping: Mapping[str, str]):
        self.mapping = dict(mapping)
        self.unmapped: Counter = Counter()

    @classmethod
    def load(cls, path) -> "GemTable":
        mapping: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) < 2:
                    raise CohortError(f"GEM file line {lineno}: expected icd10 icd9 flags")
                icd10, icd9 = _normalize(parts[0]), _normalize(parts[1])
                if icd9 == "NODX":
                    continue
                mapping.setdefault(icd10, icd9)
        return cls(mapping)

    def __len__(self) -> int:
        return len(self.mapping)


def default_gem_path() -> Path:
    return Path(__file__).parent / "data" / "gem_fixture.txt"


def _normalize(code: str) -> str:
    return code.replace(".", "").strip().upper()


def icd9_chapter(code: str) -> str:
    code = _normalize(code)
    if not code:
        return UNKNOWN_CLASS
    if code[0] == "E":
        return ICD9_E_CLASS
    if code[0] == "V":
        return ICD9_V_CLASS
    head = code[:3]
    if not head.isdigit():
        return UNKNOWN_CLASS
    number = int(head)
    for lo, hi, name in _ICD9_CHAPTERS:
        if lo <= number <= hi:
            return name
    return UNKNOWN_CLASS


def map_icd(code: str, system: str, gem_table: GemTable) -> str:
    """Top-level ICD-9 chapter of a code; ICD-10 codes go through the GEM first."""
    if system == "ICD9":
        return icd9_chapter(code)
    if system != "ICD10":
        raise CohortError(f"unknown ICD system {system!r}")
    icd9 = gem_table.mapping.get(_normalize(code))
    if icd9 is None:
        gem_table.unmapped[_normalize(code)] += 1
        logger.debug("unmappable ICD-10 code %s", code)
        return UNKNOWN_CLASS
    return icd9_chapter(icd9)


def assign_icd_classes(records: Mapping[str, PatientRecord], gem_table: GemTable) -> None:
    for record in records.values():
        record.icd_classes = [map_icd(c, s, gem_table) for c, s in record.icd_codes]
    if gem_table.unmapped:
        logger.info("%d ICD-10 codes unmappable (%d distinct)",
                    sum(gem_table.unmapped.values()), len(gem_table.unmapped))


# ---------------------------------------------------------------------------
# horizons and static features


def derive_static_features(record: PatientRecord, trajectory: VitalTrajectory,
                           horizon: float = math.inf) -> StaticFeatureVector:
    """Static model inputs for one patient; ``trajectory`` is imputed and unscaled."""
    if record.icd_classes is None:
        raise CohortError(f"patient {record.patient_id}: ICD codes not mapped")
    counts = Counter(record.icd_classes)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = ranked[0][0] if ranked else NO_CLASS
    second = ranked[1][0] if len(ranked) > 1 else NO_CLASS
    full = math.isinf(horizon)
    return StaticFeatureVector(
        age=record.age,
        gender=record.gender,
        first_careunit=record.first_careunit,
        last_careunit=record.last_careunit if full else None,
        admission_type=record.admission_type,
        admission_location=record.admission_location,
        length_of_stay_days=record.length_of_stay_days if full else None,
        top_icd_class=top,
        second_icd_class=second,
        n_unique_icd=len(counts),
        vital_means=tuple(float(v) for v in trajectory.values.mean(axis=0)),
    )


@dataclass
class PreparedCohort:
    """Imputed, scaled and feature-engineered cohort for one horizon."""

    horizon_hours: float
    patient_ids: list[str]
    imputed: dict[str, VitalTrajectory]
    scaled: dict[str, VitalTrajectory]
    scaler: ScalerState
    static: dict[str, StaticFeatureVector]
    outcomes: dict[str, bool]
    dropped: list[tuple[str, str]]


def parse_horizon(value) -> float:
    if isinstance(value, str):
        text = value.strip().lower()
        if text in {"inf", "infinity", "full", "all", "end"}:
            return math.inf
        text = text.rstrip("h")
        value = float(text)
    horizon = float(value)
    if not horizon > 0:
        raise CohortError(f"horizon must be positive, got {value!r}")
    return horizon


def truncate_horizon(trajectories: Mapping[str, VitalTrajectory], records: Mapping[str, PatientRecord],
                     horizon_hours: float = math.inf, window_minutes: float = 30,
                     zscore_features: Iterable[str] = ZSCORE_FEATURES) -> PreparedCohort:
    """Restrict grouped (pre-imputation) stays to windows starting before the horizon.

    Patients with a feature unobserved inside the horizon are dropped and
    listed in ``dropped``. Imputation, scaling and static features are
    recomputed on what remains.
    """
    horizon = parse_horizon(horizon_hours)
    kept: dict[str, VitalTrajectory] = {}
    dropped: list[tuple[str, str]] = []
    for pid, traj in trajectories.items():
        if math.isinf(horizon):
            sub = traj
        else:
            mask = traj.windows * window_minutes < horizon * 60.0
            sub = VitalTrajectory(pid, traj.windows[mask], traj.values[mask])
        observed = (~np.isnan(sub.values)).sum(axis=0) if len(sub) else np.zeros(len(FEATURES))
        empty = np.flatnonzero(observed == 0)
        if len(empty):
            dropped.append((pid, FEATURES[empty[0]]))
            continue
        kept[pid] = sub
    if dropped:
        logger.info("horizon %sh: dropped %d patients with unobserved features", horizon, len(dropped))
    if not kept:
        raise CohortError(f"horizon {horizon}h leaves no patients")
    imputed = impute_missing(kept)
    scaled, state = scale_features(imputed, zscore_features=zscore_features)
    static = {pid: derive_static_features(records[pid], imputed[pid], horizon) for pid in imputed}
    return PreparedCohort(
        horizon_hours=horizon,
        patient_ids=list(imputed),
        imputed=imputed,
        scaled=scaled,
        scaler=state,
        static=static,
        outcomes={pid: records[pid].died_in_hospital for pid in imputed},
        dropped=dropped,
    )


def readings_from_trajectories(trajectories: Iterable[VitalTrajectory], window_minutes: float = 30) -> pd.DataFrame:
    """Back-convert windows to readings stamped at each window start."""
    rows = []
    for traj in trajectories:
        for w, row in zip(traj.windows, traj.values):
            for name, v in zip(FEATURES, row):
                if not np.isnan(v):
                    rows.append((traj.patient_id, float(w * window_minutes), name, float(v)))
    return pd.DataFrame(rows, columns=VITAL_COLUMNS)

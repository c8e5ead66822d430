"""Deterministic synthetic ICU cohorts with planted trajectory archetypes.

Each archetype carries a per-feature template (baseline, linear drift per
hour, daily oscillation), a length-of-stay mean, a diagnosis-chapter mix and
a mortality rate. Patients get a personal level offset per feature, readings
arrive at irregular intervals, and a few feature readings are blanked so the
imputation path is exercised.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cohort import FEATURES

# per-reading noise SD at noise_level=1
READING_NOISE = {
    "respiration_rate": 1.5,
    "oxygen_saturation": 1.0,
    "temperature": 0.2,
    "systolic_bp": 6.0,
    "heart_rate": 5.0,
    "gcs_eye": 0.3,
    "gcs_verbal": 0.3,
    "gcs_motor": 0.3,
}
# between-patient SD of the personal level offset at noise_level=1
PATIENT_SPREAD = {
    "respiration_rate": 1.0,
    "oxygen_saturation": 0.5,
    "temperature": 0.1,
    "systolic_bp": 4.0,
    "heart_rate": 4.0,
    "gcs_eye": 0.15,
    "gcs_verbal": 0.15,
    "gcs_motor": 0.15,
}
VALUE_RANGE = {
    "respiration_rate": (4.0, 45.0),
    "oxygen_saturation": (70.0, 100.0),
    "temperature": (34.0, 41.5),
    "systolic_bp": (60.0, 220.0),
    "heart_rate": (30.0, 200.0),
    "gcs_eye": (1.0, 4.0),
    "gcs_verbal": (1.0, 5.0),
    "gcs_motor": (1.0, 6.0),
}
GCS_FEATURES = ("gcs_eye", "gcs_verbal", "gcs_motor")

CAREUNITS = ("MICU", "SICU", "CVICU", "CCU", "TSICU", "Neuro SICU")
ADMISSION_TYPES = ("EW EMER.", "URGENT", "ELECTIVE", "OBSERVATION ADMIT", "SURGICAL SAME DAY ADMISSION")
ADMISSION_LOCATIONS = ("EMERGENCY ROOM", "PHYSICIAN REFERRAL", "TRANSFER FROM HOSPITAL", "CLINIC REFERRAL")

# (icd9, icd10) pairs per chapter; every icd10 code is present in the bundled GEM fixture
CODE_BANK = {
    "001-139 infectious": [("0389", "A419"), ("00845", "A047")],
    "140-239 neoplasms": [("1629", "C3490"), ("185", "C61")],
    "240-279 endocrine": [("25000", "E119"), ("2724", "E785"), ("2761", "E871")],
    "280-289 blood": [("2851", "D62"), ("2859", "D649")],
    "290-319 mental": [("311", "F329"), ("30500", "F101")],
    "320-389 nervous": [("3489", "G9340"), ("34590", "G40909")],
    "390-459 circulatory": [("4019", "I10"), ("42731", "I4891"), ("4241", "I350"), ("41401", "I2510"),
                            ("42823", "I5023")],
    "460-519 respiratory": [("5119", "J90"), ("486", "J189"), ("51881", "J9601"), ("496", "J449")],
    "520-579 digestive": [("5559", "K5090"), ("5569", "K519"), ("5789", "K922")],
    "580-629 genitourinary": [("5849", "N179"), ("5990", "N390")],
    "680-709 skin": [("70703", "L89159")],
    "710-739 musculoskeletal": [("7100", "M329"), ("72887", "M6281")],
    "780-799 symptoms": [("79902", "R0902"), ("7862", "R05")],
    "800-999 injury": [("99591", "R6520"), ("99859", "T814XXA")],
    "E external causes": [("E8889", "W19XXXA")],
    "V supplementary": [("V5867", "Z794"), ("V1582", "Z87891")],
}
# ICD-10 code absent from the GEM fixture
UNMAPPABLE_ICD10 = "U071"


@dataclass(frozen=True)
class FeatureTemplate:
    baseline: float
    drift_per_hour: float = 0.0
    amplitude: float = 0.0


@dataclass(frozen=True)
class ArchetypeSpec:
    archetype_id: int
    templates: dict[str, FeatureTemplate]
    mortality_rate: float
    mean_length_of_stay_days: float
    icd_class_distribution: dict[str, float]
    n_patients: int = 100
    age_mean: float = 63.0
    mean_n_codes: float = 18.0
    # log-odds weights on standardized covariates: "age" or a vital name (personal offset)
    risk_weights: dict[str, float] = field(default_factory=lambda: {"age": 0.5})

    def validate(self) -> None:
        if not 0.0 <= self.mortality_rate <= 1.0:
            raise ValueError(f"archetype {self.archetype_id}: mortality_rate must be in [0, 1]")
        if self.n_patients < 1:
            raise ValueError(f"archetype {self.archetype_id}: n_patients must be >= 1")
        if not self.mean_length_of_stay_days > 0:
            raise ValueError(f"archetype {self.archetype_id}: mean LOS must be > 0")
        missing = set(FEATURES) - set(self.templates)
        if missing:
            raise ValueError(f"archetype {self.archetype_id}: missing templates for {sorted(missing)}")
        unknown = set(self.icd_class_distribution) - set(CODE_BANK)
        if unknown:
            raise ValueError(f"archetype {self.archetype_id}: unknown ICD classes {sorted(unknown)}")
        if not self.icd_class_distribution or min(self.icd_class_distribution.values()) < 0:
            raise ValueError(f"archetype {self.archetype_id}: invalid icd_class_distribution")
        for key in self.risk_weights:
            if key != "age" and key not in FEATURES:
                raise ValueError(f"archetype {self.archetype_id}: unknown risk covariate {key!r}")


def _templates(levels, drifts=None, amplitudes=None):
    drifts = drifts or {}
    amplitudes = amplitudes or {}
    return {
        name: FeatureTemplate(level, drifts.get(name, 0.0), amplitudes.get(name, 0.0))
        for name, level in zip(FEATURES, levels)
    }


# level order follows FEATURES: resp, sats, temp, sbp, hr, gcs eye, verbal, motor
DEFAULT_ARCHETYPES = (
    ArchetypeSpec(
        0, _templates((17.0, 96.0, 36.8, 122.0, 84.0, 3.9, 4.7, 5.9), amplitudes={"heart_rate": 4.0}),
        mortality_rate=0.063, mean_length_of_stay_days=2.3, age_mean=63.7, mean_n_codes=17.1,
        icd_class_distribution={"460-519 respiratory": 0.4, "390-459 circulatory": 0.2,
                                "240-279 endocrine": 0.2, "780-799 symptoms": 0.2},
    ),
    ArchetypeSpec(
        1, _templates((12.5, 98.5, 37.2, 106.0, 102.0, 2.0, 2.2, 4.0),
                      drifts={"heart_rate": -0.02}, amplitudes={"temperature": 0.3}),
        mortality_rate=0.26, mean_length_of_stay_days=11.1, age_mean=61.8, mean_n_codes=23.5,
        icd_class_distribution={"390-459 circulatory": 0.5, "280-289 blood": 0.2,
                                "580-629 genitourinary": 0.2, "V supplementary": 0.1},
    ),
    ArchetypeSpec(
        2, _templates((20.0, 93.5, 37.7, 108.0, 92.0, 1.1, 1.4, 3.0),
                      drifts={"systolic_bp": -0.1}, amplitudes={"heart_rate": 6.0}),
        mortality_rate=0.58, mean_length_of_stay_days=5.3, age_mean=68.6, mean_n_codes=18.4,
        icd_class_distribution={"390-459 circulatory": 0.5, "001-139 infectious": 0.2,
                                "800-999 injury": 0.2, "320-389 nervous": 0.1},
    ),
    ArchetypeSpec(
        3, _templates((15.0, 98.0, 36.9, 132.0, 74.0, 3.0, 3.0, 4.9)),
        mortality_rate=0.048, mean_length_of_stay_days=4.9, age_mean=62.3, mean_n_codes=18.5,
        icd_class_distribution={"390-459 circulatory": 0.5, "240-279 endocrine": 0.3,
                                "290-319 mental": 0.2},
    ),
    ArchetypeSpec(
        4, _templates((16.5, 97.5, 37.3, 116.0, 90.0, 3.8, 1.9, 5.5), amplitudes={"temperature": 0.3}),
        mortality_rate=0.078, mean_length_of_stay_days=4.4, age_mean=59.2, mean_n_codes=19.2,
        icd_class_distribution={"520-579 digestive": 0.5, "140-239 neoplasms": 0.2,
                                "580-629 genitourinary": 0.3},
    ),
    ArchetypeSpec(
        5, _templates((13.5, 97.0, 37.0, 98.0, 96.0, 3.3, 3.1, 5.0), drifts={"systolic_bp": 0.03}),
        mortality_rate=0.18, mean_length_of_stay_days=9.0, age_mean=63.1, mean_n_codes=23.5,
        icd_class_distribution={"710-739 musculoskeletal": 0.4, "680-709 skin": 0.2,
                                "280-289 blood": 0.2, "E external causes": 0.2},
    ),
)


def heterogeneous_archetypes(n_patients: int = 150) -> tuple[ArchetypeSpec, ...]:
    """Default templates with strong, archetype-specific mortality drivers.

    Archetypes come in pairs whose driver is the same covariate with opposite
    sign, so a single pooled model sees effects that cancel.
    """
    weights = (
        {"age": 6.0},
        {"age": -6.0},
        {"heart_rate": 6.0},
        {"heart_rate": -6.0},
        {"respiration_rate": 6.0},
        {"respiration_rate": -6.0},
    )
    return tuple(
        replace(spec, n_patients=n_patients, risk_weights=w, mortality_rate=0.3)
        for spec, w in zip(DEFAULT_ARCHETYPES, weights)
    )


def stationary_archetypes(n_patients: int = 100) -> tuple[ArchetypeSpec, ...]:
    """Default archetypes with drift and oscillation removed."""
    out = []
    for spec in DEFAULT_ARCHETYPES:
        flat = {k: FeatureTemplate(t.baseline) for k, t in spec.templates.items()}
        out.append(replace(spec, templates=flat, n_patients=n_patients))
    return tuple(out)


@dataclass(frozen=True)
class GeneratorSettings:
    noise_level: float = 1.0
    seed: int = 0
    mean_gap_minutes: float = 60.0
    feature_jitter_minutes: float = 4.0
    blank_fraction: tuple[float, float] = (0.05, 0.10)
    los_shape: float = 4.0
    unmappable_fraction: float = 0.01
    icd10_fraction: float = 0.4


# ---------------------------------------------------------------------------
# spec file (INI)


def _parse_mapping(text: str) -> dict[str, float]:
    out = {}
    for item in text.split(","):
        if item.strip():
            key, _, value = item.rpartition(":")
            out[key.strip()] = float(value)
    return out


def load_generator_spec(path) -> tuple[tuple[ArchetypeSpec, ...], GeneratorSettings]:
    """Read archetypes and settings from an INI file.

    ``[generator]`` holds settings; each ``[archetype.N]`` section holds one
    archetype with per-feature ``baseline, drift, amplitude`` triples.
    A ``preset`` key in ``[generator]`` (default, heterogeneous, stationary)
    supplies archetypes when no archetype sections are present.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        raise FileNotFoundError(path)
    gen = parser["generator"] if parser.has_section("generator") else {}
    settings = GeneratorSettings(
        noise_level=float(gen.get("noise_level", 1.0)),
        seed=int(gen.get("seed", 0)),
        mean_gap_minutes=float(gen.get("mean_gap_minutes", 60.0)),
        feature_jitter_minutes=float(gen.get("feature_jitter_minutes", 4.0)),
        blank_fraction=tuple(float(x) for x in gen.get("blank_fraction", "0.05, 0.10").split(",")),
        los_shape=float(gen.get("los_shape", 4.0)),
        unmappable_fraction=float(gen.get("unmappable_fraction", 0.01)),
        icd10_fraction=float(gen.get("icd10_fraction", 0.4)),
    )
    sections = [s for s in parser.sections() if s.startswith("archetype.")]
    if not sections:
        preset = gen.get("preset", "default")
        n = gen.get("n_patients_per_archetype")
        return preset_archetypes(preset, int(n) if n else None), settings

    specs = []
    for name in sections:
        sec = parser[name]
        templates = {}
        for feat in FEATURES:
            parts = [float(x) for x in sec[feat].split(",")]
            parts += [0.0] * (3 - len(parts))
            templates[feat] = FeatureTemplate(*parts[:3])
        specs.append(ArchetypeSpec(
            archetype_id=int(name.split(".", 1)[1]),
            templates=templates,
            mortality_rate=float(sec["mortality_rate"]),
            mean_length_of_stay_days=float(sec["mean_los_days"]),
            icd_class_distribution=_parse_mapping(sec["icd_classes"]),
            n_patients=int(sec.get("n_patients", 100)),
            age_mean=float(sec.get("age_mean", 63.0)),
            mean_n_codes=float(sec.get("mean_n_codes", 18.0)),
            risk_weights=_parse_mapping(sec.get("risk_weights", "age:0.5")),
        ))
    return tuple(specs), settings


def preset_archetypes(name: str, n_patients: int | None = None) -> tuple[ArchetypeSpec, ...]:
    if name == "default":
        specs = DEFAULT_ARCHETYPES
        return specs if n_patients is None else tuple(replace(s, n_patients=n_patients) for s in specs)
    if name == "heterogeneous":
        return heterogeneous_archetypes(n_patients or 150)
    if name == "stationary":
        return stationary_archetypes(n_patients or 100)
    raise ValueError(f"unknown archetype preset {name!r}")


# ---------------------------------------------------------------------------
# generation


def _weighted_choice_without_replacement(rng, weights: np.ndarray, k: int) -> np.ndarray:
    # exponential-key sampling: smallest E_i / w_i
    keys = rng.exponential(size=len(weights)) / weights
    return np.argsort(keys, kind="stable")[:k]


def _fmt(x: float, digits: int) -> str:
    text = f"{x:.{digits}f}"
    return "0." + "0" * digits if text == "-0." + "0" * digits else text


def generate_cohort(archetype_specs=DEFAULT_ARCHETYPES, noise_level: float = 1.0, seed: int = 0,
                    out_dir=None, settings: GeneratorSettings | None = None) -> dict:
    """Generate a cohort and write ``patients.csv``, ``vitals.csv``,
    ``diagnoses.csv`` and ``truth_labels.csv`` into ``out_dir``.

    Returns a dict of row lists keyed by file stem (also when ``out_dir`` is
    None, in which case nothing is written).
    """
    settings = replace(settings or GeneratorSettings(), noise_level=noise_level, seed=seed)
    if settings.noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    specs = list(archetype_specs)
    if not specs:
        raise ValueError("no archetypes")
    for spec in specs:
        spec.validate()

    rng = np.random.default_rng(seed)
    nl = settings.noise_level
    total = sum(s.n_patients for s in specs)
    archetype_of = np.concatenate([np.full(s.n_patients, i) for i, s in enumerate(specs)])
    order = rng.permutation(total)
    archetype_of = archetype_of[order]
    ids = [f"P{i + 1:05d}" for i in range(total)]

    ages = np.empty(total)
    offsets = np.zeros((total, len(FEATURES)))
    los_days = np.empty(total)
    phases = np.empty(total)
    for i in range(total):
        spec = specs[archetype_of[i]]
        ages[i] = float(np.clip(rng.normal(spec.age_mean, 16.0), 18.0, 95.0))
        offsets[i] = rng.normal(0.0, 1.0, len(FEATURES)) * np.array([PATIENT_SPREAD[f] for f in FEATURES]) * nl
        shape = settings.los_shape
        los_days[i] = max(rng.gamma(shape, spec.mean_length_of_stay_days / shape), 0.25)
        phases[i] = rng.uniform(0.0, 2 * math.pi) * min(nl, 1.0)

    died = np.zeros(total, dtype=bool)
    for a, spec in enumerate(specs):
        members = np.flatnonzero(archetype_of == a)
        n_deaths = int(round(spec.mortality_rate * len(members)))
        score = np.zeros(len(members))
        for key, weight in spec.risk_weights.items():
            cov = ages[members] if key == "age" else offsets[members, FEATURES.index(key)]
            sd = cov.std()
            if sd > 0:
                score += weight * (cov - cov.mean()) / sd
        chosen = _weighted_choice_without_replacement(rng, np.exp(score - score.max()), n_deaths)
        died[members[chosen]] = True

    base_time = np.datetime64("2150-01-01T00:00")
    patients, vitals, diagnoses, truth = [], [], [], []
    noise_sd = np.array([READING_NOISE[f] for f in FEATURES]) * nl
    lo = np.array([VALUE_RANGE[f][0] for f in FEATURES])
    hi = np.array([VALUE_RANGE[f][1] for f in FEATURES])
    gcs_cols = [FEATURES.index(f) for f in GCS_FEATURES]

    for i in range(total):
        spec = specs[archetype_of[i]]
        pid = ids[i]
        admit = base_time + np.timedelta64(int(rng.integers(0, 3650 * 24 * 60)), "m")
        stay_minutes = int(round(los_days[i] * 1440))
        discharge = admit + np.timedelta64(stay_minutes, "m")
        first = CAREUNITS[int(rng.integers(len(CAREUNITS)))]
        last = first if rng.random() < 0.85 else CAREUNITS[int(rng.integers(len(CAREUNITS)))]
        patients.append([
            pid, _fmt(ages[i], 1), "M" if rng.random() < 0.55 else "F", first, last,
            ADMISSION_TYPES[int(rng.integers(len(ADMISSION_TYPES)))],
            ADMISSION_LOCATIONS[int(rng.integers(len(ADMISSION_LOCATIONS)))],
            str(admit) + ":00", str(discharge) + ":00", "1" if died[i] else "0",
        ])
        truth.append([pid, str(spec.archetype_id)])

        # reading-set times
        times = []
        t = rng.uniform(0.0, 30.0)
        while t < stay_minutes:
            times.append(t)
            t += rng.gamma(4.0, settings.mean_gap_minutes / 4.0)
        if not times:
            times = [0.0]
        times = np.array(times)
        hours = times / 60.0
        level = np.empty((len(times), len(FEATURES)))
        for k, name in enumerate(FEATURES):
            tpl = spec.templates[name]
            level[:, k] = (tpl.baseline + offsets[i, k] + tpl.drift_per_hour * hours
                           + tpl.amplitude * np.sin(2 * math.pi * hours / 24.0 + phases[i]))
        values = level + rng.normal(0.0, 1.0, level.shape) * noise_sd
        values = np.clip(values, lo, hi)
        values[:, gcs_cols] = np.round(values[:, gcs_cols])
        jitter = rng.uniform(-1.0, 1.0, level.shape) * settings.feature_jitter_minutes
        stamp = np.clip(times[:, None] + jitter, 0.0, None)
        blank_p = rng.uniform(*settings.blank_fraction)
        blank = rng.random(level.shape) < blank_p
        blank[0] = False  # first set complete so every horizon sees every feature
        for r in range(len(times)):
            for k, name in enumerate(FEATURES):
                if not blank[r, k]:
                    vitals.append([pid, _fmt(stamp[r, k], 2), name, _fmt(values[r, k], 3)])

        # diagnoses
        classes = list(spec.icd_class_distribution)
        probs = np.array([spec.icd_class_distribution[c] for c in classes], dtype=float)
        probs /= probs.sum()
        n_codes = max(1, int(rng.poisson(spec.mean_n_codes)))
        for _ in range(n_codes):
            if rng.random() < settings.unmappable_fraction:
                diagnoses.append([pid, UNMAPPABLE_ICD10, "10"])
                continue
            chapter = classes[int(rng.choice(len(classes), p=probs))]
            icd9, icd10 = CODE_BANK[chapter][int(rng.integers(len(CODE_BANK[chapter])))]
            if rng.random() < settings.icd10_fraction:
                diagnoses.append([pid, icd10, "10"])
            else:
                diagnoses.append([pid, icd9, "9"])

    tables = {
        "patients": (["patient_id", "age", "gender", "first_careunit", "last_careunit", "admission_type",
                      "admission_location", "admit_time", "discharge_time", "died_in_hospital"], patients),
        "vitals": (["patient_id", "t_minutes", "feature", "value"], vitals),
        "diagnoses": (["patient_id", "icd_code", "icd_version"], diagnoses),
        "truth_labels": (["patient_id", "archetype_id"], truth),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for stem, (header, rows) in tables.items():
            with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)
    return {stem: rows for stem, (_, rows) in tables.items()}

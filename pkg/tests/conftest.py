import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trajrisk import synthgen  # noqa: E402
from trajrisk.cohort import FEATURES  # noqa: E402

ACCEPTANCE: dict[int, str] = {}

PATIENT_HEADER = ("patient_id,age,gender,first_careunit,last_careunit,admission_type,"
                  "admission_location,admit_time,discharge_time,died_in_hospital")


def write_cohort(folder: Path, patients, vitals, diagnoses):
    """Write the three CSV files from lists of row strings."""
    folder.mkdir(parents=True, exist_ok=True)
    (folder / "patients.csv").write_text("\n".join([PATIENT_HEADER] + patients) + "\n")
    (folder / "vitals.csv").write_text("\n".join(["patient_id,t_minutes,feature,value"] + vitals) + "\n")
    (folder / "diagnoses.csv").write_text("\n".join(["patient_id,icd_code,icd_version"] + diagnoses) + "\n")
    return folder / "patients.csv", folder / "vitals.csv", folder / "diagnoses.csv"


def patient_row(pid, died=0, admit="2150-01-01T00:00:00", discharge="2150-01-03T00:00:00", age=60):
    return f"{pid},{age},F,MICU,SICU,EMERGENCY,ER,{admit},{discharge},{died}"


def full_reading_set(pid, t, base=0.0):
    vals = [16, 96, 37, 120, 80, 4, 5, 6]
    return [f"{pid},{t},{f},{v + base}" for f, v in zip(FEATURES, vals)]


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Default archetypes, 30 patients each, sparse sampling."""
    out = tmp_path_factory.mktemp("small_cohort")
    specs = synthgen.preset_archetypes("default", 30)
    synthgen.generate_cohort(specs, noise_level=1.0, seed=5, out_dir=out,
                             settings=synthgen.GeneratorSettings(mean_gap_minutes=240))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def read_truth(folder: Path) -> pd.Series:
    return pd.read_csv(folder / "truth_labels.csv", dtype={"patient_id": str}).set_index("patient_id")["archetype_id"]


def write_pipeline_config(path: Path, cohort: Path, out: Path, truth: bool = True, **sections) -> Path:
    """INI for a cohort folder; ``sections`` maps section name to a dict of keys."""
    lines = ["[paths]", f"patients = {cohort / 'patients.csv'}", f"vitals = {cohort / 'vitals.csv'}",
             f"diagnoses = {cohort / 'diagnoses.csv'}", f"out = {out}"]
    if truth:
        lines.append(f"truth = {cohort / 'truth_labels.csv'}")
    for name, keys in sections.items():
        lines += ["", f"[{name}]"] + [f"{k} = {v}" for k, v in keys.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


SMALL_RUN = {
    "pipeline": {"seed": 3, "horizons": "24, inf"},
    "umap": {"epochs": 200},
    "hdbscan": {"min_samples": 15, "min_cluster_size": 15},
    "sweep": {"grid": "10, 15"},
    "model": {"n_bags": 1, "n_rounds": 400, "learning_rate": 0.05, "k_folds": 3, "n_pairs": 2},
}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

import json
import shutil

import pandas as pd
import pytest

from conftest import SMALL_RUN, write_pipeline_config
from trajrisk.cli import main
from trajrisk.pipeline import STAGES, parse_stages

ARTIFACTS = ("cohort_summary.json", "static_features.csv", "distances/total.tcdm", "embedding.csv",
             "sweep.csv", "labels.csv", "clusters.json", "metrics.json", "importances.csv",
             "horizon_consistency.csv", "horizon_metrics.csv", "report.md", "manifest.json")


@pytest.fixture(scope="module")
def full_run(small_cohort, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg = write_pipeline_config(root / "run.ini", small_cohort, root / "out", **SMALL_RUN)
    assert main(["run", "--config", str(cfg)]) == 0
    return cfg, root / "out"


def test_generate_command(tmp_path, capsys):
    out = tmp_path / "cohort"
    code = main(["generate", "--preset", "stationary", "--n-per-archetype", "4", "--gap-minutes", "240",
                 "--seed", "2", "--out", str(out)])
    assert code == 0
    assert "24 patients" in capsys.readouterr().out
    for name in ("patients", "vitals", "diagnoses", "truth_labels"):
        assert (out / f"{name}.csv").exists()


def test_ingest_prints_summary(small_cohort, tmp_path, capsys):
    cfg = write_pipeline_config(tmp_path / "run.ini", small_cohort, tmp_path / "out")
    assert main(["run", "--config", str(cfg), "--stages", "ingest"]) == 0
    text = capsys.readouterr().out
    assert "patients: 180" in text and "readings:" in text and "mortality:" in text
    summary = json.loads((tmp_path / "out" / "cohort_summary.json").read_text())
    assert summary["n_patients"] == 180


def test_missing_upstream_artifact(small_cohort, tmp_path, capsys):
    cfg = write_pipeline_config(tmp_path / "run.ini", small_cohort, tmp_path / "out")
    assert main(["run", "--config", str(cfg), "--stages", "cluster"]) == 2
    assert "embedding.csv" in capsys.readouterr().err


def test_bad_config_names_field(small_cohort, tmp_path, capsys):
    cfg = write_pipeline_config(tmp_path / "run.ini", small_cohort, tmp_path / "out",
                                umap={"k": "lots"})
    assert main(["run", "--config", str(cfg)]) == 2
    assert "[umap] k" in capsys.readouterr().err


def test_bad_horizon_flag(small_cohort, tmp_path, capsys):
    cfg = write_pipeline_config(tmp_path / "run.ini", small_cohort, tmp_path / "out")
    assert main(["run", "--config", str(cfg), "--horizon", "5"]) == 2
    assert "horizon" in capsys.readouterr().err


def test_parse_stages():
    assert parse_stages(None) == list(STAGES)
    assert parse_stages("report,ingest") == ["ingest", "report"]
    with pytest.raises(ValueError):
        parse_stages("ingest,bake")


def test_full_run_writes_artifacts(full_run):
    _, out = full_run
    for rel in ARTIFACTS:
        assert (out / rel).exists(), rel
    for fig in ("embedding.png", "importances.png", "sweep.png", "horizons.png", "vital_means.png"):
        assert (out / "figures" / fig).stat().st_size > 0
    report = (out / "report.md").read_text()
    assert "## Clusters" in report and "## Mortality models" in report and "## Horizons" in report
    clusters = json.loads((out / "clusters.json").read_text())
    assert clusters["n_clusters"] >= 2 and "ari_vs_truth" in clusters


def test_horizon_consistency_table(full_run):
    _, out = full_run
    cons = pd.read_csv(out / "horizon_consistency.csv")
    assert list(cons.columns) == ["horizon", "reference_cluster", "n_patients", "n_same", "fraction_same"]
    assert set(cons["horizon"]) == {"24h", "full"}
    full = cons[cons["horizon"] == "full"]
    assert (full["fraction_same"] == 1.0).all()
    assert cons["fraction_same"].between(0, 1).all()


def test_cached_rerun_skips_and_matches(full_run, capsys):
    cfg, out = full_run
    before = {rel: (out / rel).read_bytes() for rel in ARTIFACTS if rel not in ("manifest.json",)}
    assert main(["run", "--config", str(cfg)]) == 0
    text = capsys.readouterr().out
    assert "up to date: ingest, distances, embed, sweep, cluster, predict, horizons" in text
    for rel, data in before.items():
        assert (out / rel).read_bytes() == data, rel


def test_parameter_change_reruns_downstream(full_run, tmp_path, capsys):
    cfg, out = full_run
    copy = tmp_path / "out"
    shutil.copytree(out, copy)
    assert main(["run", "--config", str(cfg), "--out", str(copy), "--stages", "cluster,predict",
                 "--seed", "3"]) == 0
    assert "up to date: cluster, predict" in capsys.readouterr().out
    text = cfg.read_text().replace("min_cluster_size = 15", "min_cluster_size = 16")
    changed = tmp_path / "changed.ini"
    changed.write_text(text)
    assert main(["run", "--config", str(changed), "--out", str(copy), "--stages", "cluster,predict"]) == 0
    cached = [line for line in capsys.readouterr().out.splitlines() if line.startswith("up to date")]
    # cluster reruns; predict is keyed on the labels' content, so it may legitimately stay cached
    assert not any("cluster" in line for line in cached)


def test_fresh_run_matches_cached(full_run, tmp_path):
    cfg, out = full_run
    fresh = tmp_path / "fresh"
    assert main(["run", "--config", str(cfg), "--out", str(fresh), "--stages",
                 "ingest,distances,embed,sweep,cluster,predict"]) == 0
    for rel in ("embedding.csv", "labels.csv", "metrics.json", "distances/total.tcdm"):
        assert (fresh / rel).read_bytes() == (out / rel).read_bytes(), rel


def test_report_command(full_run, tmp_path):
    cfg, out = full_run
    (out / "report.md").unlink()
    assert main(["report", "--config", str(cfg)]) == 0
    grid = pd.read_csv(out / "metrics_grid.csv")
    assert grid["metric"].tolist()[0] == "auroc" and "pooled" in grid.columns
    assert (out / "report.md").exists()

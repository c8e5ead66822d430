import math
from pathlib import Path

import pytest

from trajrisk.config import ConfigError, PipelineConfig, load_config, parse_horizons, with_seed


def _ini(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_defaults_without_file():
    cfg = load_config()
    assert cfg == PipelineConfig(model=cfg.model)
    assert cfg.min_samples == 60 and cfg.min_cluster_size == 60
    assert cfg.horizons == (4.0, 24.0, 72.0, 168.0, math.inf)


def test_sections_parsed(tmp_path):
    path = _ini(tmp_path, """
[paths]
patients = data/patients.csv
vitals = /abs/vitals.csv
out = results

[pipeline]
seed = 7
horizons = 4, inf

[scaling]
zscore = temperature, gcs_eye

[dtw]
band = 12
parallel = no

[umap]
k = 10
epochs = 200

[hdbscan]
min_samples = 15
min_cluster_size = 20

[sweep]
grid = 10, 20
use_selection = yes

[model]
n_bags = 2
learning_rate = 0.05
""")
    cfg = load_config(path)
    assert cfg.patients == tmp_path / "data" / "patients.csv"
    assert cfg.vitals == Path("/abs/vitals.csv")
    assert cfg.out == tmp_path / "results"
    assert cfg.seed == 7 and cfg.model.seed == 7
    assert cfg.horizons == (4.0, math.inf)
    assert cfg.zscore_features == ("temperature", "gcs_eye")
    assert cfg.dtw_band == 12 and cfg.dtw_parallel is False
    assert cfg.umap_k == 10 and cfg.umap_epochs == 200
    assert (cfg.min_samples, cfg.min_cluster_size) == (15, 20)
    assert cfg.sweep_grid == (10, 20) and cfg.use_sweep_selection
    assert cfg.model.n_bags == 2 and cfg.model.learning_rate == 0.05


def test_overrides_win(tmp_path):
    path = _ini(tmp_path, "[pipeline]\nseed = 3\n")
    cfg = load_config(path, {"seed": 11, "out": tmp_path / "o", "horizons": None})
    assert cfg.seed == 11 and cfg.model.seed == 11 and cfg.out == tmp_path / "o"
    assert with_seed(cfg, 5).model.seed == 5


@pytest.mark.parametrize("text, field", [
    ("[umap]\nk = many\n", "[umap] k"),
    ("[hdbscan]\nmin_cluster_size = 1\n", "[hdbscan] min_cluster_size"),
    ("[pipeline]\nhorizons = 4, 12\n", "[pipeline] horizons"),
    ("[dtw]\nparallel = perhaps\n", "[dtw] parallel"),
    ("[scaling]\nzscore = shoe_size\n", "[scaling] zscore"),
    ("[model]\nk_folds = 1\n", "[model] k_folds"),
    ("[model]\nthreshold = 1.5\n", "[model] threshold"),
    ("[umap]\nneighbours = 5\n", "[umap] neighbours"),
    ("[colours]\nx = 1\n", "[colours]"),
])
def test_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ConfigError) as err:
        load_config(_ini(tmp_path, text))
    assert field in str(err.value)


def test_missing_file_and_inputs(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
    cfg = load_config(_ini(tmp_path, "[paths]\npatients = p.csv\nvitals = v.csv\ndiagnoses = d.csv\n"))
    with pytest.raises(ConfigError, match="patients"):
        cfg.check_inputs()


def test_parse_horizons():
    assert parse_horizons("inf, 4h, 24") == (4.0, 24.0, math.inf)
    with pytest.raises(ConfigError):
        parse_horizons("")


def test_stage_params_plain_data():
    params = load_config().stage_params()
    assert params["horizons"][-1] == "inf"
    assert isinstance(params["model"], dict) and params["out"] == "out"

"""INI pipeline configuration.

Every tunable the pipeline uses is read here; anything missing falls back
to the dataclass defaults. Relative paths resolve against the config file.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .cohort import FEATURES, HORIZONS, ZSCORE_FEATURES, parse_horizon
from .riskmodel.ebm import ModelConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class PipelineConfig:
    patients: Path | None = None
    vitals: Path | None = None
    diagnoses: Path | None = None
    gem: Path | None = None
    truth: Path | None = None
    out: Path = Path("out")
    seed: int = 0
    window_minutes: float = 30.0
    zscore_features: tuple[str, ...] = tuple(f for f in FEATURES if f in ZSCORE_FEATURES)
    dtw_band: int | None = None
    dtw_parallel: bool = True
    umap_k: int = 15
    umap_min_dist: float = 0.1
    umap_spread: float = 1.0
    umap_dims: int = 2
    umap_epochs: int = 500
    min_samples: int = 60
    min_cluster_size: int = 60
    sweep_grid: tuple[int, ...] = (20, 40, 60, 80, 100)
    use_sweep_selection: bool = False
    horizons: tuple[float, ...] = HORIZONS
    model: ModelConfig = field(default_factory=ModelConfig)

    def check_inputs(self) -> None:
        for name in ("patients", "vitals", "diagnoses"):
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"[paths] {name}: not set")
            if not Path(path).exists():
                raise ConfigError(f"[paths] {name}: file not found: {path}")
        for name in ("gem", "truth"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"[paths] {name}: file not found: {path}")

    def stage_params(self) -> dict:
        """Plain-data view used for manifests."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "model":
                value = asdict(value)
            elif isinstance(value, Path):
                value = str(value)
            elif isinstance(value, tuple):
                value = [("inf" if isinstance(v, float) and math.isinf(v) else v) for v in value]
            out[f.name] = value
        return out


def _bool(section: str, key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")


def _number(section: str, key: str, text: str, kind=int, minimum=None):
    try:
        value = kind(text.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {text!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"[{section}] {key}: must be >= {minimum}, got {value}")
    return value


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]


def parse_horizons(text: str, section: str = "pipeline", key: str = "horizons") -> tuple[float, ...]:
    out = []
    for item in _list(text):
        try:
            h = parse_horizon(item)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: bad horizon {item!r}") from None
        if h not in HORIZONS:
            raise ConfigError(f"[{section}] {key}: horizon {item!r} not one of 4, 24, 72, 168, inf")
        out.append(h)
    if not out:
        raise ConfigError(f"[{section}] {key}: empty")
    return tuple(sorted(set(out)))


_MODEL_KINDS = {f.name: f.type for f in fields(ModelConfig)}

_KNOWN = {
    "paths": {"patients", "vitals", "diagnoses", "gem", "truth", "out"},
    "pipeline": {"seed", "window_minutes", "horizons"},
    "scaling": {"zscore"},
    "dtw": {"band", "parallel"},
    "umap": {"k", "min_dist", "spread", "dims", "epochs"},
    "hdbscan": {"min_samples", "min_cluster_size"},
    "sweep": {"grid", "use_selection"},
    "model": set(_MODEL_KINDS) - {"seed"},
}


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Parse an INI file (or nothing) into a validated :class:`PipelineConfig`."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path, encoding="utf-8")
        base = path.parent
    for section in parser.sections():
        if section not in _KNOWN:
            raise ConfigError(f"[{section}]: unknown section")
        for key in parser[section]:
            if key not in _KNOWN[section]:
                raise ConfigError(f"[{section}] {key}: unknown key")

    cfg: dict = {}
    if parser.has_section("paths"):
        for key, value in parser["paths"].items():
            p = Path(value.strip())
            cfg[key] = p if p.is_absolute() else base / p
    if parser.has_section("pipeline"):
        sec = parser["pipeline"]
        if "seed" in sec:
            cfg["seed"] = _number("pipeline", "seed", sec["seed"], int, 0)
        if "window_minutes" in sec:
            cfg["window_minutes"] = _number("pipeline", "window_minutes", sec["window_minutes"], float)
            if not cfg["window_minutes"] > 0:
                raise ConfigError("[pipeline] window_minutes: must be positive")
        if "horizons" in sec:
            cfg["horizons"] = parse_horizons(sec["horizons"])
    if parser.has_section("scaling") and "zscore" in parser["scaling"]:
        names = tuple(_list(parser["scaling"]["zscore"]))
        bad = [n for n in names if n not in FEATURES]
        if bad:
            raise ConfigError(f"[scaling] zscore: unknown feature {bad[0]!r}")
        cfg["zscore_features"] = names
    if parser.has_section("dtw"):
        sec = parser["dtw"]
        if "band" in sec:
            text = sec["band"].strip().lower()
            cfg["dtw_band"] = None if text in {"", "none", "off"} else _number("dtw", "band", text, int, 0)
        if "parallel" in sec:
            cfg["dtw_parallel"] = _bool("dtw", "parallel", sec["parallel"])
    if parser.has_section("umap"):
        sec = parser["umap"]
        spec = {"k": ("umap_k", int, 2), "min_dist": ("umap_min_dist", float, 0.0),
                "spread": ("umap_spread", float, 1e-9), "dims": ("umap_dims", int, 1),
                "epochs": ("umap_epochs", int, 0)}
        for key, (name, kind, lo) in spec.items():
            if key in sec:
                cfg[name] = _number("umap", key, sec[key], kind, lo)
    if parser.has_section("hdbscan"):
        sec = parser["hdbscan"]
        if "min_samples" in sec:
            cfg["min_samples"] = _number("hdbscan", "min_samples", sec["min_samples"], int, 1)
        if "min_cluster_size" in sec:
            cfg["min_cluster_size"] = _number("hdbscan", "min_cluster_size", sec["min_cluster_size"], int, 2)
    if parser.has_section("sweep"):
        sec = parser["sweep"]
        if "grid" in sec:
            grid = tuple(_number("sweep", "grid", v, int, 2) for v in _list(sec["grid"]))
            if not grid:
                raise ConfigError("[sweep] grid: empty")
            cfg["sweep_grid"] = grid
        if "use_selection" in sec:
            cfg["use_sweep_selection"] = _bool("sweep", "use_selection", sec["use_selection"])

    model = {}
    if parser.has_section("model"):
        for key, value in parser["model"].items():
            kind = {"int": int, "float": float}[_MODEL_KINDS[key]]
            model[key] = _number("model", key, value, kind, 0)
    overrides = dict(overrides or {})
    for key, value in list(overrides.items()):
        if value is None:
            overrides.pop(key)
    cfg.update(overrides)
    seed = cfg.get("seed", 0)
    model_cfg = ModelConfig(**model, seed=seed)
    if not 0 < model_cfg.validation_fraction < 1:
        raise ConfigError("[model] validation_fraction: must be in (0, 1)")
    if model_cfg.k_folds < 2:
        raise ConfigError("[model] k_folds: must be >= 2")
    if not 0 < model_cfg.threshold < 1:
        raise ConfigError("[model] threshold: must be in (0, 1)")
    if model_cfg.max_bins < 2 or model_cfg.max_interaction_bins < 2:
        raise ConfigError("[model] max_bins: must be >= 2")
    cfg["model"] = model_cfg
    return PipelineConfig(**cfg)


def with_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(config, seed=seed, model=replace(config.model, seed=seed))

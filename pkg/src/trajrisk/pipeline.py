"""Stage runner: ingest -> distances -> embed -> sweep/cluster -> predict,
plus the horizon runner and the report.

Each stage records the hashes of the files it read, its parameters and the
hashes of what it wrote in ``manifest.json``. A stage whose inputs,
parameters and outputs are unchanged is skipped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import cohort as co
from . import dtw, hdbscan, umap, validity
from .config import PipelineConfig
from .riskmodel.evaluation import ClusterModels, train_per_cluster
from .seeding import derive_seed

logger = logging.getLogger(__name__)

STAGES = ("ingest", "distances", "embed", "sweep", "cluster", "predict", "horizons", "report")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    """A stage could not run (typically a missing upstream artifact)."""


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def horizon_tag(h: float) -> str:
    return "full" if math.isinf(h) else f"{int(h)}h"


def parse_stages(text: str | None) -> list[str]:
    if not text or text.strip() == "all":
        return list(STAGES)
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stage {bad[0]!r}; choose from {', '.join(STAGES)}")
    return [s for s in STAGES if s in names]


@dataclass
class RunContext:
    config: PipelineConfig
    out: Path
    manifest: dict = field(default_factory=dict)
    _records: dict | None = None
    _readings: pd.DataFrame | None = None
    _grouped: dict | None = None
    _prepared: dict = field(default_factory=dict)
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    # lazily built cohort state, shared by stages in one run

    def load_inputs(self):
        if self._records is None:
            cfg = self.config
            cfg.check_inputs()
            records, readings = co.ingest_cohort(cfg.patients, cfg.vitals, cfg.diagnoses)
            gem = co.GemTable.load(cfg.gem or co.default_gem_path())
            co.assign_icd_classes(records, gem)
            self._records, self._readings = records, readings
            self._grouped = co.group_observations(readings, cfg.window_minutes)
        return self._records, self._readings

    def prepared(self, horizon: float = math.inf) -> co.PreparedCohort:
        if horizon not in self._prepared:
            records, _ = self.load_inputs()
            self._prepared[horizon] = co.truncate_horizon(
                self._grouped, records, horizon, self.config.window_minutes, self.config.zscore_features)
        return self._prepared[horizon]

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise StageError(f"missing upstream artifact {p} (run the producing stage first)")


def _input_files(cfg: PipelineConfig) -> list[Path]:
    files = [cfg.patients, cfg.vitals, cfg.diagnoses, cfg.gem or co.default_gem_path()]
    return [Path(f) for f in files if f is not None]


def _rel(ctx: RunContext, path: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(ctx.out.resolve()))
    except ValueError:
        return str(path)


def _stage_key(ctx: RunContext, inputs: list[Path], params: dict) -> dict:
    return {
        "inputs": {_rel(ctx, p): file_hash(p) for p in inputs},
        "params": params,
    }


def _up_to_date(ctx: RunContext, stage: str, key: dict) -> bool:
    entry = ctx.manifest.get(stage)
    if not entry or entry.get("key") != key:
        return False
    for rel, digest in entry.get("outputs", {}).items():
        p = ctx.path(rel)
        if not p.exists() or file_hash(p) != digest:
            return False
    return True


def _record(ctx: RunContext, stage: str, key: dict, outputs: list[Path], seconds: float) -> None:
    ctx.manifest[stage] = {
        "key": key,
        "outputs": {_rel(ctx, p): file_hash(p) for p in sorted(outputs)},
        "seconds": round(seconds, 3),
    }
    write_json(ctx.path(MANIFEST), ctx.manifest)


# ---------------------------------------------------------------------------
# stage bodies; each returns the list of files it wrote


def _cluster_params(cfg: PipelineConfig, selected: int | None) -> tuple[int, int]:
    if cfg.use_sweep_selection and selected is not None:
        return selected, selected
    return cfg.min_samples, cfg.min_cluster_size


def _print_summary(summary: dict) -> None:
    print(f"patients: {summary['n_patients']}  readings: {summary['n_readings']}  "
          f"mortality: {summary['mortality_rate']:.4f}")


def run_ingest(ctx: RunContext) -> list[Path]:
    records, readings = ctx.load_inputs()
    prep = ctx.prepared(math.inf)
    summary = co.cohort_summary(records, readings)
    summary.update({
        "n_windows": int(sum(len(t) for t in prep.imputed.values())),
        "n_dropped": len(prep.dropped),
        "scaler": prep.scaler.as_dict(),
    })
    _print_summary(summary)
    out = ctx.path("cohort_summary.json")
    write_json(out, summary)
    static = pd.DataFrame([prep.static[p].as_dict() for p in prep.patient_ids])
    static.insert(0, "patient_id", prep.patient_ids)
    static["died_in_hospital"] = [int(prep.outcomes[p]) for p in prep.patient_ids]
    static_path = ctx.path("static_features.csv")
    static.to_csv(static_path, index=False, float_format="%.10g")
    return [out, static_path]


def _distances(prep: co.PreparedCohort, cfg: PipelineConfig, folder: Path) -> list[Path]:
    folder.mkdir(parents=True, exist_ok=True)
    mats = dtw.all_feature_matrices(prep.scaled, band=cfg.dtw_band, parallel=cfg.dtw_parallel)
    written = []
    for m in mats:
        p = folder / f"{m.feature_tag}.tcdm"
        m.save(p)
        written += [p, dtw.index_path(p)]
    total = dtw.total_distance_matrix(mats)
    p = folder / "total.tcdm"
    total.save(p)
    return written + [p, dtw.index_path(p)]


def run_distances(ctx: RunContext) -> list[Path]:
    return _distances(ctx.prepared(math.inf), ctx.config, ctx.path("distances"))


def _embed(total_path: Path, cfg: PipelineConfig, out: Path, tag: str) -> list[Path]:
    total = dtw.DistanceMatrix.load(total_path)
    k = min(cfg.umap_k, total.n - 1)
    emb = umap.embed(total, k=k, dims=cfg.umap_dims, n_epochs=cfg.umap_epochs,
                     min_dist=cfg.umap_min_dist, spread=cfg.umap_spread,
                     seed=derive_seed(cfg.seed, "umap", tag) % (2**32))
    emb.save(out)
    return [out]


def run_embed(ctx: RunContext) -> list[Path]:
    total = ctx.path("distances", "total.tcdm")
    ctx.require(total)
    return _embed(total, ctx.config, ctx.path("embedding.csv"), "full")


def run_sweep(ctx: RunContext) -> list[Path]:
    emb_path = ctx.path("embedding.csv")
    ctx.require(emb_path)
    emb = umap.Embedding.load(emb_path)
    grid = [v for v in ctx.config.sweep_grid if v < emb.n]
    if not grid:
        raise StageError("sweep grid has no value below the number of patients")
    result = validity.sweep_parameter(emb, grid)
    out = ctx.path("sweep.csv")
    result.to_csv(out)
    if result.error:
        logger.warning("sweep: %s", result.error)
    else:
        print(f"sweep: selected min_samples={result.selected}")
    return [out]


def _selected_from_sweep(ctx: RunContext) -> int | None:
    p = ctx.path("sweep.csv")
    if not p.exists():
        return None
    frame = pd.read_csv(p)
    chosen = frame.loc[frame["selected"] == 1, "min_samples_value"]
    return int(chosen.iloc[0]) if len(chosen) else None


def _cluster(emb: umap.Embedding, min_samples: int, min_cluster_size: int):
    n = emb.n
    return hdbscan.hdbscan(emb.coordinates, min_samples=min(min_samples, n - 1),
                           min_cluster_size=min(min_cluster_size, n))


def run_cluster(ctx: RunContext) -> list[Path]:
    emb_path = ctx.path("embedding.csv")
    ctx.require(emb_path)
    cfg = ctx.config
    if cfg.use_sweep_selection:
        ctx.require(ctx.path("sweep.csv"))
    ms, mcs = _cluster_params(cfg, _selected_from_sweep(ctx))
    emb = umap.Embedding.load(emb_path)
    result = _cluster(emb, ms, mcs)
    labels_path, tree_path = ctx.path("labels.csv"), ctx.path("condensed_tree.csv")
    result.labeling.save(labels_path, emb.patient_index)
    result.tree.to_csv(tree_path)
    lab = result.labeling
    summary = {"min_samples": ms, "min_cluster_size": mcs, "n_clusters": lab.n_clusters,
               "sizes": lab.sizes, "n_noise": lab.n_noise}
    sil, ch, db = validity.score_labeling(emb.coordinates, lab.labels)
    summary.update({"silhouette": sil, "calinski_harabasz": ch, "davies_bouldin": db})
    if cfg.truth is not None:
        truth = pd.read_csv(cfg.truth, dtype={"patient_id": str}).set_index("patient_id")["archetype_id"]
        planted = truth.loc[list(emb.patient_index)].to_numpy()
        summary["ari_vs_truth"] = validity.adjusted_rand_index(planted, lab.labels)
    out = ctx.path("clusters.json")
    write_json(out, summary)
    print(f"clusters: {lab.n_clusters} (sizes {lab.sizes}, noise {lab.n_noise})"
          + (f"  ARI vs truth {summary['ari_vs_truth']:.4f}" if "ari_vs_truth" in summary else ""))
    return [labels_path, tree_path, out]


def _write_models(result: ClusterModels, folder: Path) -> list[Path]:
    folder.mkdir(parents=True, exist_ok=True)
    written = []
    metrics = folder / "metrics.json"
    write_json(metrics, result.metrics_json())
    written.append(metrics)
    imp = folder / "importances.csv"
    result.importances_frame().to_csv(imp, index=False, float_format="%.10g")
    written.append(imp)
    for name, model in sorted(result.models.items()):
        p = folder / "models" / f"{name}.json"
        p.parent.mkdir(exist_ok=True)
        model.save(p)
        written.append(p)
    return written


def _predict(prep: co.PreparedCohort, labels_path: Path, cfg: PipelineConfig) -> ClusterModels:
    ids, lab = hdbscan.ClusterLabeling.load(labels_path)
    missing = [p for p in ids if p not in prep.static]
    if missing:
        raise StageError(f"{labels_path}: patient {missing[0]} not in the prepared cohort")
    return train_per_cluster(prep, lab.labels, cfg.model, patient_ids=ids)


def run_predict(ctx: RunContext) -> list[Path]:
    labels_path = ctx.path("labels.csv")
    ctx.require(labels_path)
    result = _predict(ctx.prepared(math.inf), labels_path, ctx.config)
    for name, rep in result.reports.items():
        print(f"{name}: AUROC {rep.mean('auroc'):.3f}  F1 {rep.mean('f1'):.3f}")
    for name, reason in result.skipped.items():
        print(f"{name}: skipped ({reason})")
    return _write_models(result, ctx.out)


def run_horizons(ctx: RunContext) -> list[Path]:
    cfg = ctx.config
    ref_path = ctx.path("labels.csv")
    ctx.require(ref_path, ctx.path("metrics.json"))
    ref_ids, ref = hdbscan.ClusterLabeling.load(ref_path)
    ref_of = dict(zip(ref_ids, ref.labels))
    ms, mcs = _cluster_params(cfg, _selected_from_sweep(ctx))
    written: list[Path] = []
    consistency_rows, metric_rows = [], []

    for h in cfg.horizons:
        tag = horizon_tag(h)
        folder = ctx.path("horizons", tag)
        folder.mkdir(parents=True, exist_ok=True)
        if math.isinf(h):
            labels_path = ref_path
            metrics = json.loads(ctx.path("metrics.json").read_text(encoding="utf-8"))
            n_dropped = len(ctx.prepared(math.inf).dropped)
        else:
            prep = ctx.prepared(h)
            n_dropped = len(prep.dropped)
            written += _distances(prep, cfg, folder / "distances")
            emb_path = folder / "embedding.csv"
            written += _embed(folder / "distances" / "total.tcdm", cfg, emb_path, tag)
            emb = umap.Embedding.load(emb_path)
            result = _cluster(emb, ms, mcs)
            labels_path = folder / "labels.csv"
            result.labeling.save(labels_path, emb.patient_index)
            written.append(labels_path)
            models = _predict(prep, labels_path, cfg)
            written += _write_models(models, folder)
            metrics = models.metrics_json()

        ids, lab = hdbscan.ClusterLabeling.load(labels_path)
        ref_here = np.array([ref_of[p] for p in ids])
        mapping, overall = validity.match_labels(ref_here, lab.labels)
        per_cluster = validity.per_cluster_consistency(ref_here, lab.labels, mapping)
        matched = np.array([mapping.get(int(o), -1) if o >= 0 else -1 for o in lab.labels])
        for c in sorted(per_cluster):
            members = ref_here == c
            consistency_rows.append({
                "horizon": tag, "reference_cluster": c, "n_patients": int(members.sum()),
                "n_same": int((matched[members] == c).sum()), "fraction_same": per_cluster[c],
            })
        consistency_rows.append({
            "horizon": tag, "reference_cluster": "all", "n_patients": int((ref_here >= 0).sum()),
            "n_same": int(((matched == ref_here) & (ref_here >= 0)).sum()), "fraction_same": overall,
        })
        for name, entry in metrics["models"].items():
            row = {"horizon": tag, "model": name, "n_patients": entry["n_patients"],
                   "n_dropped": n_dropped, "n_clusters": lab.n_clusters}
            for m, v in entry["metrics"].items():
                row[f"{m}_mean"] = v["mean"]
                row[f"{m}_sd"] = v["sd"]
            metric_rows.append(row)
        print(f"horizon {tag}: {lab.n_clusters} clusters, {overall:.3f} of reference patients keep their cluster")

    cons = ctx.path("horizon_consistency.csv")
    pd.DataFrame(consistency_rows).to_csv(cons, index=False, float_format="%.10g")
    hm = ctx.path("horizon_metrics.csv")
    pd.DataFrame(metric_rows).to_csv(hm, index=False, float_format="%.10g")
    return written + [cons, hm]


def run_report(ctx: RunContext) -> list[Path]:
    from .report import write_report

    ctx.require(ctx.path("cohort_summary.json"))
    return write_report(ctx.out, ctx.config)


_BODIES = {
    "ingest": run_ingest,
    "distances": run_distances,
    "embed": run_embed,
    "sweep": run_sweep,
    "cluster": run_cluster,
    "predict": run_predict,
    "horizons": run_horizons,
    "report": run_report,
}


def _stage_inputs(ctx: RunContext, stage: str) -> list[Path]:
    p = ctx.path
    cfg = ctx.config
    upstream = {
        "ingest": _input_files(cfg),
        "distances": _input_files(cfg),
        "embed": [p("distances", "total.tcdm")],
        "sweep": [p("embedding.csv")],
        "cluster": [p("embedding.csv")] + ([p("sweep.csv")] if cfg.use_sweep_selection else [])
                   + ([Path(cfg.truth)] if cfg.truth else []),
        "predict": _input_files(cfg) + [p("labels.csv")],
        "horizons": _input_files(cfg) + [p("labels.csv"), p("metrics.json")]
                    + ([p("sweep.csv")] if cfg.use_sweep_selection else []),
        "report": [x for x in (p("cohort_summary.json"), p("embedding.csv"), p("labels.csv"),
                               p("clusters.json"), p("sweep.csv"), p("metrics.json"),
                               p("importances.csv"), p("static_features.csv"),
                               p("horizon_consistency.csv"), p("horizon_metrics.csv"))
                   if x.exists()],
    }[stage]
    return upstream


_STAGE_PARAMS = {
    "ingest": ("window_minutes", "zscore_features"),
    "distances": ("window_minutes", "zscore_features", "dtw_band"),
    "embed": ("seed", "umap_k", "umap_min_dist", "umap_spread", "umap_dims", "umap_epochs"),
    "sweep": ("sweep_grid",),
    "cluster": ("min_samples", "min_cluster_size", "use_sweep_selection"),
    "predict": ("seed", "window_minutes", "zscore_features", "model"),
    "horizons": ("seed", "window_minutes", "zscore_features", "dtw_band", "umap_k", "umap_min_dist",
                 "umap_spread", "umap_dims", "umap_epochs", "min_samples", "min_cluster_size",
                 "use_sweep_selection", "horizons", "model"),
    "report": (),
}


def run_pipeline(config: PipelineConfig, stages=None, force: bool = False) -> RunContext:
    """Run ``stages`` (default: all) in dependency order; returns the context."""
    stages = parse_stages(stages) if isinstance(stages, str) or stages is None else \
        [s for s in STAGES if s in set(stages)]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, out)
    mpath = out / MANIFEST
    if mpath.exists():
        ctx.manifest = json.loads(mpath.read_text(encoding="utf-8"))
    all_params = config.stage_params()
    for stage in stages:
        inputs = _stage_inputs(ctx, stage)
        for f in inputs:
            if not Path(f).exists():
                raise StageError(f"stage {stage}: missing upstream artifact {f}")
        params = {k: all_params[k] for k in _STAGE_PARAMS[stage]}
        key = _stage_key(ctx, inputs, params)
        if not force and stage != "report" and _up_to_date(ctx, stage, key):
            logger.info("stage %s up to date", stage)
            if stage == "ingest":
                _print_summary(json.loads(ctx.path("cohort_summary.json").read_text(encoding="utf-8")))
            ctx.skipped.append(stage)
            continue
        start = time.perf_counter()
        outputs = _BODIES[stage](ctx)
        _record(ctx, stage, key, outputs, time.perf_counter() - start)
        ctx.executed.append(stage)
    return ctx

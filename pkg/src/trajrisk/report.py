"""report.md, delimited summary tables and PNG figures from stage artifacts."""
from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .cohort import FEATURES  # noqa: E402
from .riskmodel.evaluation import METRICS  # noqa: E402

PNG_META = {"Software": None}


def _load_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


def _fmt(x, digits: int = 3) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    if isinstance(x, float):
        return f"{x:.{digits}f}"
    return str(x)


def _md_table(frame: pd.DataFrame) -> str:
    head = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([head, rule] + body)


def cluster_characteristics(static: pd.DataFrame, labels: pd.DataFrame) -> pd.DataFrame:
    """One row per cluster (and noise) summarising who is in it."""
    frame = static.merge(labels, on="patient_id")
    rows = []
    for c in sorted(frame["cluster_label"].unique()):
        g = frame[frame["cluster_label"] == c]
        row = {
            "cluster": "noise" if c < 0 else f"cluster_{c}",
            "n_patients": len(g),
            "mortality_pct": 100.0 * g["died_in_hospital"].mean(),
            "age_mean": g["age"].mean(),
            "male_pct": 100.0 * (g["gender"] == "M").mean(),
        }
        if "length_of_stay_days" in g:
            row["los_days_mean"] = g["length_of_stay_days"].mean()
        row["top_icd_class"] = g["top_icd_class"].mode().sort_values().iloc[0]
        row["first_careunit"] = g["first_careunit"].mode().sort_values().iloc[0]
        for f in FEATURES:
            row[f"mean_{f}"] = g[f"mean_{f}"].mean()
        rows.append(row)
    return pd.DataFrame(rows)


def metrics_grid(metrics: dict) -> pd.DataFrame:
    """Metric rows x model columns, each cell 'mean (sd)'."""
    models = metrics["models"]
    names = ["pooled"] + sorted(n for n in models if n != "pooled")
    names = [n for n in names if n in models]
    rows = []
    for m in METRICS:
        row = {"metric": m}
        for n in names:
            v = models[n]["metrics"][m]
            row[n] = f"{v['mean']:.3f} ({v['sd']:.3f})"
        rows.append(row)
    return pd.DataFrame(rows)


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_META)
    plt.close(fig)


def plot_embedding(emb: pd.DataFrame, labels: pd.DataFrame, path: Path) -> None:
    frame = emb.merge(labels, on="patient_id")
    fig, ax = plt.subplots(figsize=(6, 5))
    noise = frame["cluster_label"] < 0
    ax.scatter(frame.loc[noise, "x"], frame.loc[noise, "y"], s=6, c="lightgrey", label="noise")
    cmap = plt.get_cmap("tab10")
    for c in sorted(frame.loc[~noise, "cluster_label"].unique()):
        g = frame[frame["cluster_label"] == c]
        ax.scatter(g["x"], g["y"], s=8, color=cmap(c % 10), label=f"cluster {c}")
    ax.set_xlabel("UMAP 1")
    ax.set_ylabel("UMAP 2")
    ax.legend(fontsize=7, markerscale=2)
    _save(fig, path)


def plot_importances(imp: pd.DataFrame, path: Path, top: int = 10) -> None:
    models = ["pooled"] + sorted(m for m in imp["model"].unique() if m != "pooled")
    models = [m for m in models if m in set(imp["model"])]
    fig, axes = plt.subplots(len(models), 1, figsize=(7, 2.2 * len(models)), squeeze=False)
    for ax, m in zip(axes[:, 0], models):
        g = imp[imp["model"] == m].sort_values(["importance", "term"], ascending=[False, True]).head(top)
        ax.barh(g["term"][::-1], g["importance"][::-1], color="steelblue")
        ax.set_title(m, fontsize=9)
        ax.tick_params(labelsize=7)
    axes[-1, 0].set_xlabel("mean |log-odds contribution|")
    _save(fig, path)


def plot_sweep(sweep: pd.DataFrame, path: Path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, col in zip(axes, ("silhouette", "calinski_harabasz", "davies_bouldin")):
        ax.plot(sweep["min_samples_value"], sweep[col], marker="o")
        ax.set_title(col, fontsize=9)
        ax.set_xlabel("min samples")
    _save(fig, path)


def plot_horizons(hm: pd.DataFrame, path: Path) -> None:
    order = list(dict.fromkeys(hm["horizon"]))
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, metric in zip(axes, ("auroc", "f1")):
        for model in sorted(hm["model"].unique()):
            g = hm[hm["model"] == model].set_index("horizon").reindex(order)
            ax.errorbar(range(len(order)), g[f"{metric}_mean"], yerr=g[f"{metric}_sd"],
                        marker="o", capsize=2, label=model)
        ax.set_xticks(range(len(order)))
        ax.set_xticklabels(order)
        ax.set_title(metric, fontsize=9)
    axes[1].legend(fontsize=7)
    _save(fig, path)


def plot_vital_means(static: pd.DataFrame, labels: pd.DataFrame, path: Path) -> None:
    frame = static.merge(labels, on="patient_id")
    frame = frame[frame["cluster_label"] >= 0]
    fig, axes = plt.subplots(2, 4, figsize=(12, 5))
    clusters = sorted(frame["cluster_label"].unique())
    for ax, f in zip(axes.ravel(), FEATURES):
        ax.boxplot([frame.loc[frame["cluster_label"] == c, f"mean_{f}"] for c in clusters],
                   showfliers=False)
        ax.set_xticks(range(1, len(clusters) + 1))
        ax.set_xticklabels([str(c) for c in clusters])
        ax.set_title(f, fontsize=9)
    _save(fig, path)


def write_report(out: Path, config=None) -> list[Path]:
    out = Path(out)
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    written: list[Path] = []
    summary = _load_json(out / "cohort_summary.json")
    clusters = _load_json(out / "clusters.json")
    metrics = _load_json(out / "metrics.json")

    lines = ["# Trajectory clustering and risk report", ""]
    lines += ["## Cohort", "",
              f"- patients: {summary['n_patients']}",
              f"- vital readings: {summary['n_readings']}",
              f"- 30-minute windows after grouping: {summary.get('n_windows', 'n/a')}",
              f"- in-hospital mortality: {100 * summary['mortality_rate']:.1f}%",
              f"- dropped (feature never observed): {summary.get('n_dropped', 0)}", ""]

    static_path, labels_path = out / "static_features.csv", out / "labels.csv"
    if clusters and labels_path.exists() and static_path.exists():
        static = pd.read_csv(static_path, dtype={"patient_id": str})
        labels = pd.read_csv(labels_path, dtype={"patient_id": str})
        lines += ["## Clusters", "",
                  f"HDBSCAN* with min_samples={clusters['min_samples']}, "
                  f"min_cluster_size={clusters['min_cluster_size']}: "
                  f"{clusters['n_clusters']} clusters, {clusters['n_noise']} noise patients.",
                  f"Silhouette {_fmt(clusters['silhouette'])}, Calinski-Harabasz "
                  f"{_fmt(clusters['calinski_harabasz'], 1)}, Davies-Bouldin {_fmt(clusters['davies_bouldin'])}."]
        if "ari_vs_truth" in clusters:
            lines.append(f"Adjusted Rand index against the planted archetypes: {clusters['ari_vs_truth']:.3f}.")
        lines.append("")
        chars = cluster_characteristics(static, labels)
        p = out / "cluster_characteristics.csv"
        chars.to_csv(p, index=False, float_format="%.6g")
        written.append(p)
        cols = ["cluster", "n_patients", "mortality_pct", "age_mean", "male_pct"] + \
               (["los_days_mean"] if "los_days_mean" in chars else []) + ["top_icd_class", "first_careunit"]
        lines += [_md_table(chars[cols]), ""]
        p = figs / "vital_means.png"
        plot_vital_means(static, labels, p)
        written.append(p)
        lines += ["![per-cluster stay means](figures/vital_means.png)", ""]
        emb_path = out / "embedding.csv"
        if emb_path.exists():
            emb = pd.read_csv(emb_path, comment="#", dtype={"patient_id": str})
            p = figs / "embedding.png"
            plot_embedding(emb, labels, p)
            written.append(p)
            lines += ["![embedding](figures/embedding.png)", ""]

    sweep_path = out / "sweep.csv"
    if sweep_path.exists():
        sweep = pd.read_csv(sweep_path)
        lines += ["## Min-samples sweep", "", _md_table(sweep), ""]
        if sweep[["silhouette"]].notna().any().item():
            p = figs / "sweep.png"
            plot_sweep(sweep, p)
            written.append(p)
            lines += ["![sweep](figures/sweep.png)", ""]

    if metrics:
        grid = metrics_grid(metrics)
        p = out / "metrics_grid.csv"
        grid.to_csv(p, index=False)
        written.append(p)
        lines += ["## Mortality models (mean (SD) over folds)", "", _md_table(grid), ""]
        pooled_f1 = metrics["models"].get("pooled", {}).get("metrics", {}).get("f1", {}).get("mean")
        better = [n for n, e in metrics["models"].items()
                  if n != "pooled" and pooled_f1 is not None and e["metrics"]["f1"]["mean"] > pooled_f1]
        n_cluster_models = sum(1 for n in metrics["models"] if n != "pooled")
        if pooled_f1 is not None:
            lines += [f"Per-cluster F1 above the pooled model in {len(better)} of {n_cluster_models} clusters.", ""]
        for name, reason in sorted(metrics.get("skipped", {}).items()):
            lines.append(f"- {name} skipped: {reason}")
        lines.append("")
        imp_path = out / "importances.csv"
        if imp_path.exists():
            imp = pd.read_csv(imp_path)
            if len(imp):
                p = figs / "importances.png"
                plot_importances(imp, p)
                written.append(p)
                lines += ["![feature importances](figures/importances.png)", ""]

    cons_path, hm_path = out / "horizon_consistency.csv", out / "horizon_metrics.csv"
    if cons_path.exists() and hm_path.exists():
        cons = pd.read_csv(cons_path)
        hm = pd.read_csv(hm_path)
        lines += ["## Horizons", "", "Fraction of patients keeping their full-stay cluster:", "",
                  _md_table(cons), ""]
        cols = ["horizon", "model", "n_patients", "auroc_mean", "auroc_sd", "f1_mean", "f1_sd"]
        lines += [_md_table(hm[cols]), ""]
        p = figs / "horizons.png"
        plot_horizons(hm, p)
        written.append(p)
        lines += ["![metrics by horizon](figures/horizons.png)", ""]

    report = out / "report.md"
    report.write_text("\n".join(lines), encoding="utf-8")
    written.append(report)
    return written

"""Emission of analysis artifacts: CSV tables, static plots derived from
them, and a reproducibility manifest."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "biasprobe"
import matplotlib.pyplot as plt  # noqa: E402

from .stats import CONTRASTS, ZTestResult  # noqa: E402
from .subspace import DimensionProbeResult, GenderSubspace, RecallClustering  # noqa: E402
from .templates import BreakdownTable  # noqa: E402

_PLOT_META = {"Date": None}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _save_plot(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_PLOT_META)
    plt.close(fig)


def emit_accuracy_curve(sweep_results: list[GenderSubspace], csv_path: str | Path,
                        plot_path: str | Path | None = None) -> None:
    """Per-checkpoint SVM accuracy: the emergence curve with a chance line."""
    if not sweep_results:
        raise ValueError("empty sweep")
    ordered = sorted(sweep_results, key=lambda s: s.checkpoint)
    rows = [(s.checkpoint, s.cv_accuracy, s.train_accuracy) for s in ordered]
    write_csv(csv_path, ["epoch", "cv_accuracy", "train_accuracy"], rows)
    if plot_path is None:
        return
    epochs = [r[0] for r in rows]
    cv = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, cv, marker="o", label="cv accuracy")
    ax.axhline(0.5, linestyle="--", color="grey", label="chance")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Gender subspace accuracy across checkpoints")
    ax.legend()
    _save_plot(fig, Path(plot_path))


def emit_dimension_report(probe_results: list[DimensionProbeResult],
                          ablations: dict[int, float],
                          sweep_results: list[GenderSubspace],
                          csv_path: str | Path,
                          plot_path: str | Path | None = None,
                          k: int = 5) -> list[DimensionProbeResult]:
    """Top-k single-dimension probes per checkpoint alongside the full and
    all-but-best accuracies (`ablations` maps epoch to the refit accuracy
    with the best dimension removed); returns the selected probes."""
    by_epoch: dict[int, list[DimensionProbeResult]] = {}
    for r in probe_results:
        by_epoch.setdefault(r.checkpoint, []).append(r)
    full_by_epoch = {s.checkpoint: s for s in sweep_results}

    rows = []
    selected = []
    for epoch in sorted(by_epoch):
        probes = by_epoch[epoch]
        k_eff = min(k, len(probes))
        if k > len(probes):
            warnings.warn(f"k={k} clipped to {len(probes)} available dimensions",
                          stacklevel=2)
        top = sorted(probes, key=lambda r: (-r.cv_accuracy, r.dimension))[:k_eff]
        selected.extend(top)
        full = full_by_epoch.get(epoch)
        for rank, probe in enumerate(top, start=1):
            rows.append((
                epoch, rank, probe.dimension, probe.cv_accuracy,
                probe.recall_female, probe.recall_male,
                full.cv_accuracy if full else None,
                ablations.get(epoch),
            ))
    write_csv(csv_path,
              ["epoch", "rank", "dimension", "cv_accuracy", "recall_female",
               "recall_male", "full_cv_accuracy", "all_but_best_cv_accuracy"],
              rows)

    if plot_path is None:
        return selected
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = sorted(by_epoch)
    if full_by_epoch:
        xs = [e for e in epochs if e in full_by_epoch]
        ax.plot(xs, [full_by_epoch[e].cv_accuracy for e in xs],
                marker="o", label="all dimensions")
    best = {e: max(by_epoch[e], key=lambda r: (r.cv_accuracy, -r.dimension)) for e in epochs}
    ax.plot(epochs, [best[e].cv_accuracy for e in epochs],
            marker="s", label="best single dimension")
    if ablations:
        xs = [e for e in epochs if e in ablations]
        ax.plot(xs, [ablations[e] for e in xs],
                marker="^", label="all but best dimension")
    ax.axhline(0.5, linestyle="--", color="grey", label="chance")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cv accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Localized vs distributed gender information")
    ax.legend()
    _save_plot(fig, Path(plot_path))
    return selected


def emit_recall_heatmaps(clusterings: list[RecallClustering], csv_path: str | Path,
                         plot_prefix: str | Path | None = None,
                         summary_path: str | Path | None = None) -> None:
    """Cluster-mean recall per dimension for each class, as CSV and heatmaps."""
    rows = []
    for cl in clusterings:
        for dim, cid in enumerate(cl.assignments):
            rows.append((cl.cls, dim, cid, cl.cluster_means[cid]))
    write_csv(csv_path, ["class", "dimension", "cluster_id", "cluster_mean_recall"], rows)

    if summary_path is not None:
        summary_rows = []
        for cl in clusterings:
            values = np.array([cl.cluster_means[c] for c in cl.assignments])
            summary_rows.append((cl.cls, len(cl.assignments), float(values.mean()),
                                 float(values.var())))
        write_csv(summary_path, ["class", "n_dimensions", "mean_recall",
                                 "recall_variance"], summary_rows)

    if plot_prefix is None:
        return
    for cl in clusterings:
        values = np.array([cl.cluster_means[c] for c in cl.assignments])
        cols = min(32, len(values))
        rows_n = int(np.ceil(len(values) / cols))
        grid = np.full(rows_n * cols, np.nan)
        grid[:len(values)] = values
        fig, ax = plt.subplots(figsize=(8, max(2, rows_n * 0.3)))
        im = ax.imshow(grid.reshape(rows_n, cols), vmin=0.0, vmax=1.0,
                       cmap="viridis", aspect="auto")
        ax.set_title(f"Clustered mean recall per dimension ({cl.cls} class)")
        ax.set_xlabel(f"dimension (row-major, {cols} per row)")
        fig.colorbar(im, ax=ax, label="cluster mean recall")
        _save_plot(fig, Path(f"{plot_prefix}_{cl.cls}.svg"))


# Full-scale reference accuracies for side-by-side display in the bias table.
PAPER_REFERENCE = {
    "all: pro-stereotypical vs anti-stereotypical": (0.825, 0.437),
    "female targets: pro-stereotypical vs anti-stereotypical": (0.780, 0.460),
    "male targets: pro-stereotypical vs anti-stereotypical": (0.930, 0.400),
    "anti-stereotypical: female targets vs male targets": (0.460, 0.400),
    "pro-stereotypical: female targets vs male targets": (0.780, 0.930),
    "female anti-stereotypical: female-suffix vs neutral": (0.830, 0.090),
    "female pro-stereotypical: female-suffix vs neutral": (0.970, 0.600),
}

def emit_bias_tables(breakdown: BreakdownTable, ztests: list[ZTestResult],
                     accuracy_csv: str | Path, significance_csv: str | Path) -> None:
    """Accuracy contrasts with reference columns, plus the significance table."""
    needed = {"alignment", "target_gender", "attribute_form"}
    if not needed.issubset(set(breakdown.facets)):
        raise ValueError(f"breakdown must cover facets {sorted(needed)}")
    rows = []
    for label, side1, side2 in CONTRASTS:
        c1 = breakdown.aggregate(**side1)
        c2 = breakdown.aggregate(**side2)
        acc1, acc2 = c1.accuracy, c2.accuracy
        diff = (acc1 - acc2) if acc1 is not None and acc2 is not None else None
        ref1, ref2 = PAPER_REFERENCE[label]
        rows.append((label, c1.n, acc1, c2.n, acc2, diff, ref1, ref2,
                     round(ref1 - ref2, 3)))
    write_csv(accuracy_csv,
              ["comparison", "n_1", "accuracy_1", "n_2", "accuracy_2",
               "difference", "paper_accuracy_1", "paper_accuracy_2",
               "paper_difference"], rows)

    z_rows = []
    for zt in ztests:
        z_rows.append((zt.comparison_label,
                       zt.z if zt.computable and not zt.degenerate else None,
                       zt.p_value if zt.computable and not zt.degenerate else None,
                       zt.n1, zt.x1, zt.n2, zt.x2))
    write_csv(significance_csv, ["comparison", "z", "p_value", "n1", "x1", "n2", "x2"],
              z_rows)


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    corpus_fingerprint: str
    checkpoints: list[dict] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "corpus_fingerprint": self.corpus_fingerprint,
            "checkpoints": self.checkpoints,
            "outputs": self.outputs,
        }


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")


def build_manifest(config: dict, seeds: dict, corpus_fingerprint: str,
                   checkpoints: list[tuple[int, str]],
                   output_files: list[str | Path]) -> RunManifest:
    manifest = RunManifest(config=config, seeds=seeds,
                           corpus_fingerprint=corpus_fingerprint)
    manifest.checkpoints = [{"epoch": e, "checksum": c} for e, c in checkpoints]
    for f in sorted(str(p) for p in output_files):
        manifest.outputs[Path(f).name] = file_sha256(f)
    return manifest

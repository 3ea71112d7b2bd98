"""Evaluation report output: JSON, CSV table, and rendered figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from dmad.errors import StorageError
from dmad.evaluate import METRIC_KEYS, EvalReport

_CSV_COLUMNS = ("object",) + METRIC_KEYS


def write_report_json(report: EvalReport, path: str | Path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_json_dict(), f, indent=2, allow_nan=False)
            f.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write report {path}: {exc}") from exc


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """One row per object plus a final macro-average row; absent metrics blank."""

    def fmt(value: float | None) -> str:
        return "" if value is None else f"{value:.6f}"

    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(_CSV_COLUMNS)
            for obj in sorted(report.per_object):
                row = report.per_object[obj]
                writer.writerow([obj] + [fmt(row[k]) for k in METRIC_KEYS])
            writer.writerow(["mean"] + [fmt(report.aggregate[k]) for k in METRIC_KEYS])
    except OSError as exc:
        raise StorageError(f"cannot write report {path}: {exc}") from exc


def render_figures(
    report: EvalReport,
    out_dir: str | Path,
    image_scores: dict[str, tuple[list[float], list[int]]] | None = None,
) -> list[Path]:
    """Render metric bars (and a score histogram when scores are given) as PNGs.

    Figures are written with fixed metadata so repeated deterministic runs
    produce identical bytes.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    meta = {"Software": "dmad"}

    objects = sorted(report.per_object)
    bar_keys = [k for k in ("image_auroc", "pixel_auroc", "pro") if any(
        report.per_object[o][k] is not None for o in objects
    )]
    if bar_keys:
        fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(objects)), 3.2))
        width = 0.8 / len(bar_keys)
        xs = range(len(objects))
        for i, key in enumerate(bar_keys):
            vals = [report.per_object[o][key] or 0.0 for o in objects]
            ax.bar([x + i * width for x in xs], vals, width=width, label=key)
        ax.set_xticks([x + 0.4 - width / 2 for x in xs])
        ax.set_xticklabels(objects, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("score")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / "metrics_bars.png"
        fig.savefig(path, dpi=120, metadata=meta)
        plt.close(fig)
        written.append(path)

    if image_scores:
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        normal = [s for scores, labels in image_scores.values() for s, l in zip(scores, labels) if l == 0]
        anomalous = [s for scores, labels in image_scores.values() for s, l in zip(scores, labels) if l == 1]
        if normal:
            ax.hist(normal, bins=20, alpha=0.6, label="normal")
        if anomalous:
            ax.hist(anomalous, bins=20, alpha=0.6, label="anomalous")
        ax.set_xlabel("image score")
        ax.set_ylabel("count")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / "score_histogram.png"
        fig.savefig(path, dpi=120, metadata=meta)
        plt.close(fig)
        written.append(path)
    return written


def write_loss_log(rows, path: str | Path) -> None:
    """Training loss CSV with columns epoch, step, loss, term_n, term_p, term_a."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "step", "loss", "term_n", "term_p", "term_a"])
            for row in rows:
                writer.writerow(
                    [row.epoch, row.step, f"{row.loss:.9g}", f"{row.term_n:.9g}", f"{row.term_p:.9g}", f"{row.term_a:.9g}"]
                )
    except OSError as exc:
        raise StorageError(f"cannot write loss log {path}: {exc}") from exc

"""Report emission: machine-readable JSON, delimited tables, and figures.

Every writer is deterministic byte-for-byte given equal inputs so that
rerunning an experiment with the same seeds reproduces identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data.samples import IGNORE_LABEL
from .evaluation import EvalReport


def _fmt(value) -> str:
    return "-" if value is None else f"{100.0 * value:.1f}"


def _iou_row(report: EvalReport) -> list:
    return list(report.per_class_iou) + [report.miou]


def write_report_json(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return path


def read_report_json(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_dict(json.load(fh))


def write_report_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "iou"])
        for class_id, iou in enumerate(report.per_class_iou):
            writer.writerow([class_id, "" if iou is None else repr(iou)])
        writer.writerow(["miou", repr(report.miou)])
        for name, value in sorted(report.class_subset_mious.items()):
            writer.writerow([name, repr(value)])
    return path


def write_report_table(report: EvalReport, path, row_label: str = "model") -> Path:
    """Aligned per-class table, one column per class plus mIoU."""
    n = len(report.per_class_iou)
    headers = [f"c{c}" for c in range(n)] + ["mIoU"]
    rows = [[row_label] + [_fmt(v) for v in _iou_row(report)]]
    lines = _render_table(["scenario: " + report.scenario], headers, rows)
    if report.excluded_classes:
        lines.append(f"excluded (empty union): {report.excluded_classes}")
    for name, value in sorted(report.class_subset_mious.items()):
        lines.append(f"{name}: {_fmt(value)}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def _render_table(preamble: list[str], headers: list[str], rows: list[list[str]]) -> list[str]:
    label_w = max([len(r[0]) for r in rows] + [5])
    col_w = max([len(h) for h in headers] + [5])
    lines = list(preamble)
    lines.append(" ".join(["model".ljust(label_w)] + [h.rjust(col_w) for h in headers]))
    for row in rows:
        lines.append(" ".join([row[0].ljust(label_w)] + [v.rjust(col_w) for v in row[1:]]))
    return lines


def plot_per_class_iou(report: EvalReport, path) -> Path:
    n = len(report.per_class_iou)
    values = [0.0 if v is None else v for v in report.per_class_iou]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * n), 3.2))
    ax.bar(range(n), values, color="#4878cf")
    ax.axhline(report.miou, color="#d65f5f", linestyle="--", linewidth=1,
               label=f"mIoU = {report.miou:.3f}")
    ax.set_xlabel("class id")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.set_xticks(range(n))
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(f"per-class IoU ({report.scenario})")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def emit_report(report: EvalReport, out_dir, name: str = "eval_report",
                row_label: str = "model") -> dict[str, Path]:
    """Write {name}.json/.csv/.txt and the per-class IoU figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "json": write_report_json(report, out_dir / f"{name}.json"),
        "csv": write_report_csv(report, out_dir / f"{name}.csv"),
        "table": write_report_table(report, out_dir / f"{name}.txt", row_label=row_label),
        "figure": plot_per_class_iou(report, out_dir / f"{name}_iou.png"),
    }


def emit_comparison(reports: dict[str, EvalReport], out_dir,
                    name: str = "comparison") -> dict[str, Path]:
    """Variant-by-class comparison table (csv + txt + grouped figure)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = list(reports)
    n = len(next(iter(reports.values())).per_class_iou)
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + [f"class_{c}" for c in range(n)] + ["miou"])
        for label in labels:
            row = ["" if v is None else repr(v) for v in reports[label].per_class_iou]
            writer.writerow([label] + row + [repr(reports[label].miou)])

    headers = [f"c{c}" for c in range(n)] + ["mIoU"]
    rows = [[label] + [_fmt(v) for v in _iou_row(reports[label])] for label in labels]
    txt_path = out_dir / f"{name}.txt"
    txt_path.write_text("\n".join(_render_table([], headers, rows)) + "\n")

    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.2))
    ax.bar(range(len(labels)), [reports[label].miou for label in labels], color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.set_title("mIoU by model variant")
    fig.tight_layout()
    fig_path = out_dir / f"{name}.png"
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)
    return {"csv": csv_path, "table": txt_path, "figure": fig_path}


def plot_training_curve(records: list[dict], path) -> Path | None:
    steps = [r["step"] for r in records if "loss_total" in r]
    losses = [r["loss_total"] for r in records if "loss_total" in r]
    if not steps:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def colorize_mask(mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Map class ids to palette colors; ignored pixels become black."""
    table = np.zeros((256, 3), dtype=np.float64)
    table[:len(palette)] = palette
    table[IGNORE_LABEL] = 0.0
    return table[mask].astype(np.float32)

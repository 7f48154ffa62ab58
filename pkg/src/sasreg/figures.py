"""Report figures: metric box plots, odd/even overlays, markdown tables."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricsReport  # noqa: E402

BOXPLOT_METRICS = ("ssim", "ncc", "psnr_db", "vci_after")


def save_boxplot(values_by_label: dict[str, list[float]], metric: str,
                 path: Path) -> Path:
    """One box per method for a single metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = list(values_by_label)
    data = [[v for v in values_by_label[lab] if math.isfinite(v)] for lab in labels]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 3.2))
    ax.boxplot(data, tick_labels=labels)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} distribution")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def overlay_rgb(odd_half: np.ndarray, even_half: np.ndarray) -> np.ndarray:
    """Magenta/green overlay of the two halves: odd drives red+blue, even
    drives green, so aligned structure shows up white/gray."""
    o = np.clip(np.asarray(odd_half, dtype=np.float64), 0.0, 1.0)
    e = np.clip(np.asarray(even_half, dtype=np.float64), 0.0, 1.0)
    if o.shape != e.shape:
        raise ValueError(f"half shapes differ: {o.shape} vs {e.shape}")
    return np.stack([o, e, o], axis=-1)


def save_overlay(odd_half: np.ndarray, even_half: np.ndarray, path: Path,
                 title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = overlay_rgb(odd_half, even_half)
    fig, ax = plt.subplots(figsize=(4, 4 * rgb.shape[0] / max(1, rgb.shape[1])))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _format_cell(stats: dict | None) -> str:
    if not stats or stats.get("mean") is None:
        return "inf" if stats and stats.get("infinite") else "-"
    return f"{stats['mean']:.3f} ± {stats['std']:.3f}"


def markdown_table(reports: dict[str, MetricsReport]) -> str:
    """Method-by-metric comparison table (mean ± std per cell)."""
    columns = ["ssim", "psnr_db", "ncc", "vci_before", "vci_after"]
    header = "| Method | " + " | ".join(c.upper() for c in columns) + " |"
    rule = "|" + "---|" * (len(columns) + 1)
    rows = [header, rule]
    for label, report in reports.items():
        cells = [_format_cell(report.aggregate.get(c)) for c in columns]
        rows.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(rows) + "\n"


def save_report_figures(reports: dict[str, MetricsReport], out_dir: Path) -> list[Path]:
    """Box plot per metric across methods plus the markdown table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in BOXPLOT_METRICS:
        values = {}
        for label, report in reports.items():
            if metric == "psnr_db":
                vals = [m.psnr_db for m in report.per_frame
                        if m.psnr_db is not None and math.isfinite(m.psnr_db)]
            else:
                vals = [getattr(m, metric) for m in report.per_frame]
            values[label] = vals
        written.append(save_boxplot(values, metric, out_dir / f"box_{metric}.png"))
    table_path = out_dir / "comparison.md"
    table_path.write_text(markdown_table(reports))
    written.append(table_path)
    return written

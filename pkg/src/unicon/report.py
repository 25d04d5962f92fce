"""Dice tables (CSV and plain text) and bar charts for training runs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import AGE_LABELS  # noqa: E402
from .phantom import MUTATION_COLUMNS  # noqa: E402

DICE_COLUMNS = ("model", "params(M)", *AGE_LABELS, "Avg")
ZERO_SHOT_GROUPS = tuple((f"Mut{kind}", age) for kind, age in MUTATION_COLUMNS)
ZERO_SHOT_COLUMNS = ("model", "params(M)", *(f"{c} {AGE_LABELS[a]}" for c, a in ZERO_SHOT_GROUPS), "Avg")


def dice_row(model: str, params: int, by_age: dict, groups=(0, 1, 2, 3)) -> list:
    """One table row; Avg is recomputed as the mean of the listed group columns."""
    vals = [float(by_age[g]) for g in groups]
    return [model, params / 1e6, *vals, float(np.mean(vals))]


def rows_from_ablation(results: list[dict]) -> list[list]:
    return [dice_row(r["model"], r["params"], r) for r in results]


def rows_from_zero_shot(results: list[tuple[str, int, dict]]) -> list[list]:
    """``results`` holds (model name, parameter count, zero-shot report keyed by (cohort, age))."""
    return [dice_row(name, params, by_group, ZERO_SHOT_GROUPS) for name, params, by_group in results]


def format_table(columns, rows, scale: float = 100.0) -> str:
    """Fixed-width text table; Dice columns are shown as percentages."""
    cells = [list(columns)]
    for row in rows:
        cells.append([row[0], f"{row[1]:.2f}", *(f"{scale * v:.1f}" for v in row[2:])])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    for n, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_csv(columns, rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    return path


def read_csv(path) -> tuple[list[str], list[list]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[r[0], *(float(v) for v in r[1:])] for r in reader]
    return header, rows


def plot_rows(columns, rows, path, title: str = "") -> Path:
    """Grouped bar chart: one group per Dice column, one bar per model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = list(columns[2:])
    x = np.arange(len(groups))
    width = 0.8 / max(1, len(rows))
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(groups), 3.2))
    for i, row in enumerate(rows):
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, np.asarray(row[2:]) * 100, width, label=row[0])
    ax.set_xticks(x)
    ax.set_xticklabels(groups, fontsize=8)
    ax.set_ylabel("Dice (%)")
    lo = min(min(r[2:]) for r in rows) * 100
    ax.set_ylim(max(0.0, lo - 5), 100)
    ax.spines[["top", "right"]].set_visible(False)
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(rows, out_dir, stem: str = "dice", columns=DICE_COLUMNS, title: str = "") -> dict[str, Path]:
    """Write ``stem.csv``, ``stem.txt`` and ``stem.png`` under ``out_dir``."""
    if not rows:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_table(columns, rows)
    (out_dir / f"{stem}.txt").write_text(text)
    return {
        "csv": write_csv(columns, rows, out_dir / f"{stem}.csv"),
        "txt": out_dir / f"{stem}.txt",
        "png": plot_rows(columns, rows, out_dir / f"{stem}.png", title),
    }

"""Report rendering: delimited logs/tables plus matplotlib figures beside them.

Training emits one JSONL record per step; evaluation emits a JSON report and
a TSV metric table.  Each report path also renders a PNG figure (loss curves
for training, metric bars for evaluation) next to the delimited file.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

LOSS_KEYS = ("span_mlm", "contrastive", "bow", "policy", "generation", "joint")


def write_jsonl(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def append_jsonl(row: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_metrics_tsv(metrics: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric\tvalue\n")
        for name in sorted(metrics):
            fh.write(f"{name}\t{metrics[name]}\n")


def plot_loss_curves(records: list[dict], path) -> None:
    """Render per-component loss curves from training-log records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = [r["step"] for r in records]
    for key in LOSS_KEYS:
        values = [r.get(key) for r in records]
        if any(v is not None for v in values):
            ax.plot(steps, values, label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def plot_metric_bars(metrics: dict, path, title: str = "evaluation") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(metrics)
    values = [metrics[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 3.5))
    ax.bar(names, values, color="#4878a8")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)

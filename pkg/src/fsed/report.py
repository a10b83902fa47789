"""Delimited report files and matplotlib figures for run outputs."""

from __future__ import annotations

import csv
import json
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import EvalReport  # noqa: E402


def write_reports_json(reports: Sequence[EvalReport], path) -> None:
    rows = [row for report in reports for row in report.to_rows()]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    fields = ["type", "precision", "recall", "f1", "micro_f1", "macro_f1", "repeat", "seed"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for report in reports:
            for row in report.to_rows():
                writer.writerow(row)


def plot_per_type_f1(reports: Sequence[EvalReport], path) -> None:
    """Bar chart of per-type F1 averaged over repeats, with micro/macro lines."""
    by_type: dict[str, list[float]] = {}
    for report in reports:
        for score in report.per_type:
            by_type.setdefault(score.type, []).append(score.f1)
    types = sorted(by_type)
    means = [sum(by_type[t]) / len(by_type[t]) for t in types]
    micro = sum(r.micro_f1 for r in reports) / len(reports)
    macro = sum(r.macro_f1 for r in reports) / len(reports)

    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(types)), 4))
    ax.bar(range(len(types)), means, color="#3276b3")
    ax.axhline(micro, color="#548039", linestyle="--", label=f"micro {micro:.3f}")
    ax.axhline(macro, color="#c35a20", linestyle=":", label=f"macro {macro:.3f}")
    ax.set_xticks(range(len(types)))
    ax.set_xticklabels(types, rotation=45, ha="right")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history: dict, path) -> None:
    """Training loss and dev micro-F1 per epoch on twin axes."""
    epochs = [e["epoch"] for e in history["epochs"]]
    loss = [e["train_loss"] for e in history["epochs"]]
    dev = [e["dev_micro_f1"] for e in history["epochs"]]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, loss, color="#3276b3", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="#3276b3")
    twin = ax.twinx()
    twin.plot(epochs, dev, color="#548039", label="dev micro-F1")
    twin.set_ylabel("dev micro-F1", color="#548039")
    twin.set_ylim(0, 1)
    best = history.get("best_epoch")
    if best:
        twin.axvline(best, color="#c35a20", linestyle=":", label="best epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_clean_vs_ambiguous(rows: Sequence[dict], path) -> None:
    """Grouped bars: clean and ambiguity-augmented micro-F1 per system."""
    seeds = [r["seed"] for r in rows]
    x = range(len(seeds))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(seeds)), 4))
    ax.bar([i - 1.5 * width for i in x], [r["base_clean"] for r in rows], width,
           label="base clean", color="#3276b3")
    ax.bar([i - 0.5 * width for i in x], [r["base_ambiguous"] for r in rows], width,
           label="base ambiguous", color="#9dc3e6")
    ax.bar([i + 0.5 * width for i in x], [r["causal_clean"] for r in rows], width,
           label="intervened clean", color="#548039")
    ax.bar([i + 1.5 * width for i in x], [r["causal_ambiguous"] for r in rows], width,
           label="intervened ambiguous", color="#a9d18e")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel("micro-F1")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Run summaries and figures from metrics CSV files.

The report step merges any number of per-run metrics files into one
summary.csv and renders loss, accuracy, and memory curves as PNG files.
Rendering uses the Agg backend so it works headless.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError
from .training import MetricsRow, read_metrics_csv

__all__ = ["SummaryRow", "SUMMARY_HEADER", "summarize_runs", "write_summary_csv", "render_figures", "report"]

SUMMARY_HEADER = (
    "run,epochs,final_train_loss,final_train_accuracy,"
    "final_val_loss,final_val_accuracy,best_val_accuracy,max_extra_bytes"
)


@dataclass
class SummaryRow:
    run: str
    epochs: int
    final_train_loss: float
    final_train_accuracy: float
    final_val_loss: float | None
    final_val_accuracy: float | None
    best_val_accuracy: float | None
    max_extra_bytes: int


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def load_runs(metrics_paths) -> dict[str, list[MetricsRow]]:
    runs: dict[str, list[MetricsRow]] = {}
    for path in metrics_paths:
        name = Path(path).stem
        if name in runs:
            raise ConfigError(f"two metrics files share the run name {name!r}")
        runs[name] = read_metrics_csv(path)
    return runs


def summarize_runs(runs: dict[str, list[MetricsRow]]) -> list[SummaryRow]:
    out = []
    for name, rows in runs.items():
        train = [r for r in rows if r.split == "train"]
        val = [r for r in rows if r.split == "val"]
        if not train:
            raise ConfigError(f"run {name!r} has no train rows")
        out.append(
            SummaryRow(
                run=name,
                epochs=train[-1].epoch + 1,
                final_train_loss=train[-1].loss,
                final_train_accuracy=train[-1].accuracy,
                final_val_loss=val[-1].loss if val else None,
                final_val_accuracy=val[-1].accuracy if val else None,
                best_val_accuracy=max(r.accuracy for r in val) if val else None,
                max_extra_bytes=max(r.extra_bytes for r in rows),
            )
        )
    return out


def write_summary_csv(path, rows: list[SummaryRow]) -> None:
    lines = [SUMMARY_HEADER]
    for r in rows:
        lines.append(
            f"{r.run},{r.epochs},{r.final_train_loss!r},{r.final_train_accuracy!r},"
            f"{_fmt(r.final_val_loss)},{_fmt(r.final_val_accuracy)},"
            f"{_fmt(r.best_val_accuracy)},{r.max_extra_bytes}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _curve_figure(runs, field: str, ylabel: str, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, rows in runs.items():
        for split, style in (("train", "-"), ("val", "--")):
            pts = [(r.epoch, getattr(r, field)) for r in rows if r.split == split]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, style, label=f"{name}/{split}")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _memory_figure(runs, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, rows in runs.items():
        pts = [(r.epoch, r.extra_bytes / 1024.0) for r in rows if r.split == "train"]
        xs, ys = zip(*pts)
        ax.step(xs, ys, where="post", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training memory (KiB)")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_figures(runs: dict[str, list[MetricsRow]], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "loss.png", out_dir / "accuracy.png", out_dir / "memory.png"]
    _curve_figure(runs, "loss", "cross-entropy loss", paths[0])
    _curve_figure(runs, "accuracy", "accuracy", paths[1])
    _memory_figure(runs, paths[2])
    return paths


def report(metrics_paths, out_dir) -> tuple[Path, list[Path]]:
    """Merge metrics files into out_dir/summary.csv plus PNG figures."""
    runs = load_runs(metrics_paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.csv"
    write_summary_csv(summary_path, summarize_runs(runs))
    figure_paths = render_figures(runs, out_dir)
    return summary_path, figure_paths

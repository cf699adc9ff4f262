"""Render run artifacts into plain-text tables, CSV files, and PNG charts.

Reads the JSON reports a run directory already contains (CLIP scores, jury
ranking, classification metrics, term frequencies) and renders each into the
published column layouts. Rendering is a pure function of those files: two
invocations over the same run directory produce byte-identical output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .util import read_json

CLIP_HEADERS = ("Disaster type", "VLM model", "Avg. CLIPScore", "Max. CLIPScore", "Min. CLIPScore")
JURY_CANDIDATE_HEADER = "Candidate Model"
METRICS_HEADERS = ("VLM model", "Accuracy(%)", "Precision", "Recall", "F1-Score")
TERM_HEADERS = ("Category", "Term", "Count")

NOT_AVAILABLE = "n/a"
_FIGURE_DPI = 100
_PNG_METADATA = {"Software": "damagepipe"}

CLIP_REPORT = "clip_report.json"
JURY_REPORT = "jury_report.json"
METRICS_REPORT = "metrics_report.json"
TERM_REPORT = "term_frequencies.json"


class ReportInputError(FileNotFoundError):
    """Raised when a run directory holds nothing renderable."""


def format_real(value: float | None, decimals: int = 4) -> str:
    """Fixed-point rendering with ``n/a`` for undefined values."""
    return NOT_AVAILABLE if value is None else f"{value:.{decimals}f}"


def format_accuracy_percent(value: float | None) -> str:
    """Accuracy as a one-decimal percentage, e.g. 0.871 -> ``87.1``."""
    return NOT_AVAILABLE if value is None else f"{100.0 * value:.1f}"


def render_table(headers: tuple[str, ...], rows: list[tuple[str, ...]]) -> str:
    """Column-aligned plain-text table with ``|`` separators."""
    table = [tuple(headers)] + [tuple(row) for row in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = [" | ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "-+-".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def render_clip_table(clip_report: dict, dataset_label: str) -> str:
    rows = [
        (
            dataset_label,
            entry["candidate_model"],
            format_real(entry["avg"], 2),
            format_real(entry["max"], 2),
            format_real(entry["min"], 2),
        )
        for entry in clip_report["reports"]
    ]
    return render_table(CLIP_HEADERS, rows)


def render_jury_table(jury_report: dict, dataset_label: str) -> str:
    rows = [
        (entry["candidate_model"], format_real(entry["mean_score"], 2))
        for entry in jury_report["ranking"]
    ]
    return render_table((JURY_CANDIDATE_HEADER, dataset_label), rows)


def render_metrics_table(metrics_report: dict) -> str:
    header_note = f"Positive class: {metrics_report['positive_class']}\n"
    rows = [
        (
            entry["candidate_model"],
            format_accuracy_percent(entry["accuracy"]),
            format_real(entry["precision"]),
            format_real(entry["recall"]),
            format_real(entry["f1"]),
        )
        for entry in metrics_report["candidates"]
    ]
    return header_note + render_table(METRICS_HEADERS, rows)


def render_term_table(term_report: dict, per_category: int = 10) -> str:
    rows = [
        (category, entry["term"], str(entry["count"]))
        for category in sorted(term_report["categories"])
        for entry in term_report["categories"][category][:per_category]
    ]
    return render_table(TERM_HEADERS, rows)


def _write_csv(path: Path, headers: tuple[str, ...], rows: list[tuple[str, ...]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(headers)
        writer.writerows(rows)


def _new_figure(width: float = 8.0, height: float = 4.5):
    return plt.figure(figsize=(width, height), dpi=_FIGURE_DPI)


def _save_figure(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=_FIGURE_DPI, metadata=dict(_PNG_METADATA))
    plt.close(fig)


def save_clip_figure(clip_report: dict, dataset_label: str, path: Path) -> None:
    entries = clip_report["reports"]
    names = [e["candidate_model"] for e in entries]
    fig = _new_figure()
    ax = fig.add_subplot(111)
    positions = range(len(names))
    width = 0.27
    for offset, (key, label) in enumerate((("avg", "Avg."), ("max", "Max."), ("min", "Min."))):
        ax.bar(
            [p + (offset - 1) * width for p in positions],
            [e[key] for e in entries],
            width=width,
            label=label,
        )
    ax.set_xticks(list(positions))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("CLIPScore")
    ax.set_title(f"CLIPScore by model — {dataset_label}")
    ax.legend()
    _save_figure(fig, path)


def save_jury_figure(jury_report: dict, dataset_label: str, path: Path) -> None:
    ranking = jury_report["ranking"]
    fig = _new_figure()
    ax = fig.add_subplot(111)
    names = [e["candidate_model"] for e in ranking]
    ax.bar(names, [e["mean_score"] for e in ranking], color="tab:blue")
    ax.set_ylim(0, 100)
    ax.set_ylabel("Mean jury score")
    ax.set_title(f"Jury ranking — {dataset_label}")
    ax.tick_params(axis="x", rotation=20)
    _save_figure(fig, path)


def save_metrics_figure(metrics_report: dict, path: Path) -> None:
    entries = metrics_report["candidates"]
    names = [e["candidate_model"] for e in entries]
    fig = _new_figure()
    ax = fig.add_subplot(111)
    positions = range(len(names))
    width = 0.2
    metrics = (("accuracy", "Accuracy"), ("precision", "Precision"), ("recall", "Recall"), ("f1", "F1"))
    for offset, (key, label) in enumerate(metrics):
        values = [e[key] if e[key] is not None else 0.0 for e in entries]
        ax.bar([p + (offset - 1.5) * width for p in positions], values, width=width, label=label)
    ax.set_xticks(list(positions))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Score")
    ax.set_title(f"Classification vs ground truth (positive: {metrics_report['positive_class']})")
    ax.legend()
    _save_figure(fig, path)


def save_term_figure(term_report: dict, path: Path, per_category: int = 10) -> None:
    fig = _new_figure(10.0, 7.5)
    for plot_index, category in enumerate(sorted(term_report["categories"]), start=1):
        ax = fig.add_subplot(2, 2, plot_index)
        ranked = term_report["categories"][category][:per_category]
        terms = [entry["term"] for entry in reversed(ranked)]
        counts = [entry["count"] for entry in reversed(ranked)]
        ax.barh(terms, counts, color="tab:orange")
        ax.set_title(f"Category {category}")
        ax.tick_params(labelsize=8)
    fig.suptitle("Most frequent description terms by damage category")
    _save_figure(fig, path)


def write_reports(run_dir: Path, dataset_label: str = "Dataset", out_dir: Path | None = None) -> list[Path]:
    """Render every report the run directory holds; error if there are none.

    Returns the list of files written (text tables, CSVs, and PNG charts under
    ``<run_dir>/report/`` by default).
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    sources = [run_dir / name for name in (CLIP_REPORT, JURY_REPORT, METRICS_REPORT, TERM_REPORT)]
    if not any(path.exists() for path in sources):
        raise ReportInputError(f"no report inputs found in {run_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    clip_path, jury_path, metrics_path, term_path = sources
    if clip_path.exists():
        clip_report = read_json(clip_path)
        written.append(_write_text(out_dir / "clip_scores.txt", render_clip_table(clip_report, dataset_label)))
        _write_csv(
            out_dir / "clip_scores.csv",
            CLIP_HEADERS,
            [
                (
                    dataset_label,
                    e["candidate_model"],
                    format_real(e["avg"], 2),
                    format_real(e["max"], 2),
                    format_real(e["min"], 2),
                )
                for e in clip_report["reports"]
            ],
        )
        written.append(out_dir / "clip_scores.csv")
        save_clip_figure(clip_report, dataset_label, out_dir / "clip_scores.png")
        written.append(out_dir / "clip_scores.png")
    if jury_path.exists():
        jury_report = read_json(jury_path)
        written.append(_write_text(out_dir / "jury_scores.txt", render_jury_table(jury_report, dataset_label)))
        _write_csv(
            out_dir / "jury_scores.csv",
            (JURY_CANDIDATE_HEADER, dataset_label),
            [
                (e["candidate_model"], format_real(e["mean_score"], 2))
                for e in jury_report["ranking"]
            ],
        )
        written.append(out_dir / "jury_scores.csv")
        save_jury_figure(jury_report, dataset_label, out_dir / "jury_scores.png")
        written.append(out_dir / "jury_scores.png")
    if metrics_path.exists():
        metrics_report = read_json(metrics_path)
        written.append(_write_text(out_dir / "metrics.txt", render_metrics_table(metrics_report)))
        _write_csv(
            out_dir / "metrics.csv",
            METRICS_HEADERS,
            [
                (
                    e["candidate_model"],
                    format_accuracy_percent(e["accuracy"]),
                    format_real(e["precision"]),
                    format_real(e["recall"]),
                    format_real(e["f1"]),
                )
                for e in metrics_report["candidates"]
            ],
        )
        written.append(out_dir / "metrics.csv")
        save_metrics_figure(metrics_report, out_dir / "metrics.png")
        written.append(out_dir / "metrics.png")
    if term_path.exists():
        term_report = read_json(term_path)
        written.append(_write_text(out_dir / "term_frequencies.txt", render_term_table(term_report)))
        _write_csv(
            out_dir / "term_frequencies.csv",
            TERM_HEADERS,
            [
                (category, entry["term"], str(entry["count"]))
                for category in sorted(term_report["categories"])
                for entry in term_report["categories"][category]
            ],
        )
        written.append(out_dir / "term_frequencies.csv")
        save_term_figure(term_report, out_dir / "term_frequencies.png")
        written.append(out_dir / "term_frequencies.png")
    return written


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path

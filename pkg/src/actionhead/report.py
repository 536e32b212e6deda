"""Experiment report rendering: markdown tables, CSV, and PNG figures.

Success-rate rows are keyed by (task, backbone, mode); throughput rows come
from the benchmark module. The report directory ends up with one markdown
file, the delimited data behind each table, and a figure per table.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ReportError(ValueError):
    pass


MODE_LABELS = {"normal": "Norm", "decoupled": "Dec"}


def _check_success_rows(rows: list[dict]) -> None:
    needed = {"task", "backbone", "mode", "mean_success"}
    for row in rows:
        missing = needed - set(row)
        if missing:
            raise ReportError(f"success row missing fields {sorted(missing)}: {row}")
        if not 0.0 <= row["mean_success"] <= 1.0:
            raise ReportError(f"success rate {row['mean_success']} outside [0, 1]")
        if row["mode"] not in MODE_LABELS:
            raise ReportError(f"unknown mode {row['mode']!r}")


def markdown_table(headers: list[str], rows: list[list]) -> str:
    def fmt(cell):
        if isinstance(cell, float):
            return f"{cell:.3f}"
        return "" if cell is None else str(cell)

    lines = ["| " + " | ".join(headers) + " |",
             "| " + " | ".join("---" for _ in headers) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(fmt(c) for c in row) + " |")
    return "\n".join(lines) + "\n"


def success_table(rows: list[dict]) -> tuple[list[str], list[list]]:
    """Task-by-task success rates, one Norm and one Dec column per backbone."""
    _check_success_rows(rows)
    backbones = sorted({r["backbone"] for r in rows})
    tasks = sorted({r["task"] for r in rows})
    headers = ["task"]
    for b in backbones:
        for m in ("normal", "decoupled"):
            headers.append(f"{b} {MODE_LABELS[m]}")
    cell = {(r["task"], r["backbone"], r["mode"]): r["mean_success"] for r in rows}
    table = []
    for t in tasks:
        line = [t]
        for b in backbones:
            for m in ("normal", "decoupled"):
                line.append(cell.get((t, b, m)))
        table.append(line)
    return headers, table


def throughput_table(bench_rows: list[dict]) -> tuple[list[str], list[list]]:
    """Backbone-by-backbone iterations/s, normal vs decoupled."""
    headers = ["backbone", "normal it/s", "decoupled it/s", "speedup %"]
    table = []
    for row in bench_rows:
        table.append([
            row["backbone"],
            row.get("normal"),
            row.get("decoupled"),
            None if row.get("speedup_pct") is None else round(row["speedup_pct"], 1),
        ])
    return headers, table


def _write_csv(path: Path, headers: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        for row in rows:
            w.writerow(["" if c is None else c for c in row])


def _success_figure(path: Path, rows: list[dict]) -> None:
    backbones = sorted({r["backbone"] for r in rows})
    tasks = sorted({r["task"] for r in rows})
    cell = {(r["task"], r["backbone"], r["mode"]): r["mean_success"] for r in rows}
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(tasks)), 4))
    width = 0.8 / max(1, 2 * len(backbones))
    xs = range(len(tasks))
    offset = 0
    for b in backbones:
        for m in ("normal", "decoupled"):
            vals = [cell.get((t, b, m)) for t in tasks]
            pos = [x - 0.4 + (offset + 0.5) * width for x in xs]
            ax.bar(pos, [0 if v is None else v for v in vals], width,
                   label=f"{b} {MODE_LABELS[m]}")
            offset += 1
    ax.set_xticks(list(xs))
    ax.set_xticklabels(tasks, rotation=20, ha="right")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _throughput_figure(path: Path, bench_rows: list[dict]) -> None:
    kinds = [r["backbone"] for r in bench_rows]
    normal = [r.get("normal") or 0 for r in bench_rows]
    dec = [r.get("decoupled") or 0 for r in bench_rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.4 * len(kinds)), 4))
    xs = range(len(kinds))
    ax.bar([x - 0.2 for x in xs], normal, 0.4, label="normal")
    ax.bar([x + 0.2 for x in xs], dec, 0.4, label="decoupled")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(kinds)
    ax.set_ylabel("iterations/s")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(outdir, success_rows: list[dict] | None = None,
                 bench_rows: list[dict] | None = None,
                 title: str = "Experiment report") -> dict:
    """Render markdown + CSV + PNG into `outdir`; returns written paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    sections = [f"# {title}\n"]

    if success_rows:
        headers, table = success_table(success_rows)
        sections.append("## Task success rates\n")
        sections.append(markdown_table(headers, table))
        _write_csv(out / "success_rates.csv", headers, table)
        _success_figure(out / "success_rates.png", success_rows)
        sections.append("\n![success rates](success_rates.png)\n")
        written["success_csv"] = str(out / "success_rates.csv")
        written["success_png"] = str(out / "success_rates.png")

    if bench_rows:
        headers, table = throughput_table(bench_rows)
        sections.append("## Training throughput\n")
        sections.append(markdown_table(headers, table))
        _write_csv(out / "throughput.csv", headers, table)
        _throughput_figure(out / "throughput.png", bench_rows)
        sections.append("\n![throughput](throughput.png)\n")
        written["throughput_csv"] = str(out / "throughput.csv")
        written["throughput_png"] = str(out / "throughput.png")

    if not written:
        raise ReportError("nothing to report: no success rows and no bench rows")

    md = out / "report.md"
    md.write_text("\n".join(sections))
    written["markdown"] = str(md)
    return written

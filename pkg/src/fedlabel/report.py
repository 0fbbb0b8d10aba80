"""Metrics files and SVG charts for local-vs-global accuracy per round."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .federation import RoundMetrics

METRICS_HEADER = ("iteration", "user", "local_acc", "global_acc")
SUMMARY_HEADER = ("user", "local_update", "global_update", "accuracy_increase")


def _rows_from_metrics(metrics: Sequence[RoundMetrics], names: Sequence[str] | None):
    rows = []
    for m in metrics:
        for k, u in enumerate(m.users):
            name = names[k] if names else f"User_{u.user + 1}"
            rows.append((m.iteration, name, u.local_acc, u.global_acc))
    return rows


def write_metrics_csv(rows, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for it, user, local, glob in rows:
            w.writerow((it, user, f"{local:.6f}", f"{glob:.6f}"))


def load_metrics(path: str | Path) -> list[tuple[int, str, float, float]]:
    """Rows of a metrics.csv (a directory is taken to contain one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        return [
            (int(r["iteration"]), r["user"], float(r["local_acc"]), float(r["global_acc"]))
            for r in reader
        ]


def summarize(rows) -> list[tuple[str, float, float, float]]:
    """Per-user mean accuracies in percent plus an ``Average`` row."""
    by_user: dict[str, list] = defaultdict(list)
    for _, user, local, glob in rows:
        by_user[user].append((local, glob))
    out = []
    for user in sorted(by_user, key=_user_key):
        vals = by_user[user]
        local = 100 * sum(v[0] for v in vals) / len(vals)
        glob = 100 * sum(v[1] for v in vals) / len(vals)
        out.append((user, local, glob, glob - local))
    n = len(out)
    local = sum(r[1] for r in out) / n
    glob = sum(r[2] for r in out) / n
    out.append(("Average", local, glob, glob - local))
    return out


def _user_key(name: str):
    tail = name.rsplit("_", 1)[-1]
    return (0, int(tail), name) if tail.isdigit() else (1, 0, name)


def write_summary_csv(summary, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for user, local, glob, inc in summary:
            w.writerow((user, f"{local:.2f}", f"{glob:.2f}", f"{inc:.2f}"))


def line_chart_svg(
    title: str,
    x: Sequence[float],
    series: dict[str, Sequence[float]],
    y_label: str = "accuracy (%)",
    width: int = 640,
    height: int = 400,
) -> str:
    """A small standalone SVG line chart; y runs over [0, 100]."""
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(x), max(x)
    span = (x1 - x0) or 1.0

    def px(v):
        return left + (v - x0) / span * pw

    def py(v):
        return top + ph - max(0.0, min(100.0, v)) / 100.0 * ph

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    for tick in range(0, 101, 20):
        y = py(tick)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{tick}</text>')
    for v in x:
        parts.append(f'<text x="{px(v):.1f}" y="{top + ph + 18}" text-anchor="middle">{v:g}</text>')
    parts.append(
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>'
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>'
    )
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">iteration</text>')
    parts.append(
        f'<text transform="translate(16 {top + ph / 2:.1f}) rotate(-90)" text-anchor="middle">{escape(y_label)}</text>'
    )
    for k, (name, ys) in enumerate(series.items()):
        colour = colours[k % len(colours)]
        points = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, ys))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{points}"/>')
        for a, b in zip(x, ys):
            parts.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="3" fill="{colour}"/>')
        ly = top + 14 + 16 * k
        parts.append(f'<line x1="{left + pw - 140}" y1="{ly}" x2="{left + pw - 120}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 114}" y="{ly + 4}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_charts(rows, out: Path) -> list[Path]:
    by_user: dict[str, list] = defaultdict(list)
    for it, user, local, glob in rows:
        by_user[user].append((it, local, glob))
    written = []
    per_iter: dict[int, list[float]] = defaultdict(list)
    for user in sorted(by_user, key=_user_key):
        pts = sorted(by_user[user])
        its = [p[0] for p in pts]
        svg = line_chart_svg(
            f"{user}: local vs global update",
            its,
            {"Local Update": [100 * p[1] for p in pts], "Global Update": [100 * p[2] for p in pts]},
        )
        path = out / f"{user.lower()}.svg"
        path.write_text(svg, encoding="utf-8")
        written.append(path)
        for it, _, glob in pts:
            per_iter[it].append(glob)
    its = sorted(per_iter)
    svg = line_chart_svg(
        "Global average accuracy",
        its,
        {"Global Average": [100 * sum(per_iter[i]) / len(per_iter[i]) for i in its]},
    )
    path = out / "global_average.svg"
    path.write_text(svg, encoding="utf-8")
    written.append(path)
    return written


def emit_report_rows(rows, out_dir: str | Path) -> list[Path]:
    if not rows:
        raise ValueError("no metrics to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    write_summary_csv(summarize(rows), out / "summary.csv")
    return [out / "metrics.csv", out / "summary.csv", *write_charts(rows, out)]


def emit_report(metrics: Sequence[RoundMetrics], out_dir: str | Path, names: Sequence[str] | None = None) -> list[Path]:
    """metrics.csv, summary.csv, one chart per user and a global-average chart."""
    return emit_report_rows(_rows_from_metrics(metrics, names), out_dir)


def write_rounds(metrics: Sequence[RoundMetrics], path: Path, names: Sequence[str] | None = None) -> None:
    """Per-round detail including timings; not byte-stable across runs."""
    doc = []
    for m in metrics:
        doc.append(
            {
                "iteration": m.iteration,
                "global_average_acc": m.global_average_acc,
                "global_overall_acc": m.global_overall_acc,
                "seconds": m.seconds,
                "users": [
                    {
                        "user": names[k] if names else u.user + 1,
                        "local_acc": u.local_acc,
                        "global_acc": u.global_acc,
                        "build_acc": u.build_acc,
                        "cold_start": u.cold_start,
                    }
                    for k, u in enumerate(m.users)
                ],
            }
        )
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")

"""Tabulate run directories into report.csv and draw accuracy-vs-epoch curves as SVG."""
from __future__ import annotations

import csv
import json
from collections import OrderedDict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ParseError
from .training import METRIC_KEYS

REPORT_HEADER = ["mode", "seed", "alpha", "beta", "gamma", "k", "final_accuracy", "final_macro_f1", "status"]
_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def read_metrics(path):
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path.name}: invalid JSON ({e.msg})", line=lineno) from e
            if not isinstance(rec, dict) or set(rec) != set(METRIC_KEYS):
                raise ParseError(f"{path.name}: record keys do not match the metrics schema", line=lineno)
            records.append(rec)
    if not records:
        raise ParseError(f"{path}: no metrics records")
    return records


def _run_weights(run_dir):
    cfg_path = Path(run_dir) / "config.json"
    if not cfg_path.exists():
        return {"alpha": "", "beta": "", "gamma": ""}
    loss = json.loads(cfg_path.read_text(encoding="utf-8")).get("loss", {})
    return {k: loss.get(k, "") for k in ("alpha", "beta", "gamma")}


def _summary_status(run_dir):
    p = Path(run_dir) / "summary.json"
    if not p.exists():
        return {}
    summary = json.loads(p.read_text(encoding="utf-8"))
    return {e["seed"]: e["status"] for e in summary.get("per_seed", [])}


def build_rows(run_dirs):
    """One row per (mode, seed) with the final student test metrics, then one mean row per mode."""
    rows = []
    by_mode = OrderedDict()
    for run_dir in run_dirs:
        records = read_metrics(Path(run_dir) / "metrics.jsonl")
        weights = _run_weights(run_dir)
        status = _summary_status(run_dir)
        finals = OrderedDict()
        for r in records:
            if r["model"] == "student" and r["split"] == "test":
                finals[(r["mode"], r["k"], r["seed"])] = r
        for (mode, k, seed), r in finals.items():
            row = {"mode": mode, "seed": seed, **weights, "k": k,
                   "final_accuracy": r["accuracy"], "final_macro_f1": r["macro_f1"],
                   "status": status.get(seed, "ok")}
            rows.append(row)
            by_mode.setdefault((mode, k, weights["alpha"], weights["beta"], weights["gamma"]), []).append(row)
    for (mode, k, a, b, g), group in by_mode.items():
        rows.append({"mode": mode, "seed": "mean", "alpha": a, "beta": b, "gamma": g, "k": k,
                     "final_accuracy": float(np.mean([x["final_accuracy"] for x in group])),
                     "final_macro_f1": float(np.mean([x["final_macro_f1"] for x in group])),
                     "status": f"n={len(group)}"})
    return rows


def write_report(rows, path):
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def curve_series(run_dirs):
    """Seed-averaged accuracy per epoch, keyed by (label, model, split)."""
    series = OrderedDict()
    multi = len(run_dirs) > 1
    for run_dir in run_dirs:
        acc = OrderedDict()
        for r in read_metrics(Path(run_dir) / "metrics.jsonl"):
            label = f"{r['mode']}(k={r['k']})" if multi else ""
            acc.setdefault((label, r["model"], r["split"]), {}).setdefault(r["epoch"], []).append(r["accuracy"])
        for key, by_epoch in acc.items():
            epochs = sorted(by_epoch)
            series[key] = [(e, float(np.mean(by_epoch[e]))) for e in epochs]
    return series


def render_svg(series, width=720, height=420, title="accuracy vs epoch"):
    left, right, top, bottom = 56, 200, 30, 40
    pw, ph = width - left - right, height - top - bottom
    max_epoch = max((pts[-1][0] for pts in series.values() if pts), default=1) or 1

    def sx(e):
        return left + pw * (e / max_epoch)

    def sy(a):
        return top + ph * (1.0 - a)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(a)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{a:.2f}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">epoch (1..{max_epoch})</text>')
    for i, ((label, model, split), pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        dash = ' stroke-dasharray="5,3"' if split == "test" else ""
        coords = " ".join(f"{sx(e):.1f},{sy(a):.1f}" for e, a in pts)
        name = " ".join(x for x in (label, model, split) if x)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{coords}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = top + 14 * i + 8
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}"{dash}/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def make_report(run_dirs, out_dir=None, svg=True):
    run_dirs = [Path(d) for d in run_dirs]
    out_dir = Path(out_dir) if out_dir is not None else run_dirs[0]
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = build_rows(run_dirs)
    report = write_report(rows, out_dir / "report.csv")
    svg_path = None
    if svg:
        svg_path = out_dir / "curves.svg"
        svg_path.write_text(render_svg(curve_series(run_dirs)), encoding="utf-8")
    return report, svg_path

"""Run directories: dataset assembly, multi-seed training, grid search, persistence."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, generate_dataset, ingest_jsonl, normalize, split_dataset, write_jsonl
from .errors import PSKDError
from .models import make_specs, save_model
from .training import (TEACHERS, TrainData, Trainer, derive_seed, expand_grid, final_metrics, mean_std)

log = logging.getLogger(__name__)

GRID_HEADER = ["alpha", "beta", "gamma", "mean_accuracy", "std_accuracy",
               "mean_macro_f1", "std_macro_f1", "best", "status"]


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics: Path
    summary: Path
    config: Path
    norm: Path | None
    checkpoints: list
    report: Path | None = None
    failed_seeds: tuple = ()


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.resolved(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    dc = cfg.dataset
    if dc.source == "files":
        return ingest_jsonl(dc.data_path, dc.meta_path)
    return generate_dataset(dc.synthetic)


def prepare(cfg: ExperimentConfig, ds: Dataset | None = None):
    """Split, normalize and lay out the data; returns (TrainData, specs, norm stats)."""
    ds = load_dataset(cfg) if ds is None else ds
    ds = split_dataset(ds, cfg.dataset.train_fraction, cfg.dataset.split_seed)
    stats = None
    if cfg.dataset.normalize:
        ds, stats = normalize(ds)
    data = TrainData.from_dataset(ds, cfg.dataset.fused_length, cfg.schedule.precision)
    m = cfg.model
    specs = make_specs(ds.meta, tuple(m.widths), m.kernel_size, m.d_sem)
    return data, specs, stats


def write_dataset(cfg: ExperimentConfig, out_dir=None, force=False):
    out_dir = Path(out_dir) if out_dir is not None else Path(cfg.output.dir) / "data"
    return write_jsonl(generate_dataset(cfg.dataset.synthetic), out_dir, force=force)


def _dump_line(rec):
    return json.dumps(rec.to_json(), allow_nan=False) + "\n"


def _final_block(records):
    out = {}
    for role in (*TEACHERS, "student"):
        try:
            r = final_metrics(records, role, "test")
        except PSKDError:
            continue
        out[role] = {"accuracy": r.accuracy, "macro_f1": r.macro_f1, "epoch": r.epoch}
    return out


def run_train(cfg: ExperimentConfig, out_dir=None, data_bundle=None) -> RunArtifacts:
    """Train every configured seed; write metrics.jsonl, summary.json, checkpoints."""
    run_dir = Path(out_dir) if out_dir is not None else Path(cfg.output.dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data, specs, stats = data_bundle if data_bundle is not None else prepare(cfg)
    config_path = run_dir / "config.json"
    config_path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    norm_path = None
    if stats is not None:
        norm_path = run_dir / "norm.json"
        norm_path.write_text(json.dumps(stats.to_json(), indent=2) + "\n", encoding="utf-8")

    sch = cfg.schedule
    run_id = f"{sch.mode}-k{sch.k}-{config_digest(cfg)}"
    metrics_path = run_dir / "metrics.jsonl"
    per_seed, checkpoints, failed = [], [], []
    with metrics_path.open("w", encoding="utf-8", newline="\n") as mf:
        for seed in cfg.seeds:
            tr = Trainer(data, specs, sch, cfg.loss, seed=seed, run_id=run_id,
                         record_wall_time=cfg.output.record_wall_time)
            status = "ok"
            try:
                tr.run()
            except PSKDError as e:
                status = f"error: {e}"
                failed.append(seed)
                log.error("seed %s failed: %s", seed, e)
            for rec in tr.records:
                mf.write(_dump_line(rec))
            entry = {"seed": seed, "status": status, "final": _final_block(tr.records)}
            per_seed.append(entry)
            if cfg.output.save_checkpoints and status == "ok":
                ck_dir = run_dir / f"seed_{seed}"
                ck_dir.mkdir(exist_ok=True)
                roles = ("student",) if sch.mode == "no_distill" else (*TEACHERS, "student")
                for role in roles:
                    p = ck_dir / f"{role}.ckpt"
                    save_model(tr.model(role), p)
                    checkpoints.append(p)

    summary = {"run_id": run_id, "mode": sch.mode, "k": sch.k, "epochs": sch.epochs,
               "loss": cfg.loss.model_dump(mode="json"), "per_seed": per_seed, "aggregate": {}}
    for role in (*TEACHERS, "student"):
        accs = [e["final"][role]["accuracy"] for e in per_seed if role in e["final"] and e["status"] == "ok"]
        f1s = [e["final"][role]["macro_f1"] for e in per_seed if role in e["final"] and e["status"] == "ok"]
        if accs:
            am, asd = mean_std(accs)
            fm, fsd = mean_std(f1s)
            summary["aggregate"][role] = {"mean_accuracy": am, "std_accuracy": asd,
                                          "mean_macro_f1": fm, "std_macro_f1": fsd, "n": len(accs)}
    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return RunArtifacts(run_dir, metrics_path, summary_path, config_path, norm_path, checkpoints,
                        failed_seeds=tuple(failed))


def run_gridsearch(cfg: ExperimentConfig, grid, out_dir=None):
    """One row per (alpha, beta, gamma) cell, aggregated over the configured seeds.

    For listed seed ``s`` and cell index ``i`` the run seed is ``derive_seed(s, i)``.
    """
    run_dir = Path(out_dir) if out_dir is not None else Path(cfg.output.dir) / "gridsearch"
    run_dir.mkdir(parents=True, exist_ok=True)
    data, specs, _ = prepare(cfg)
    (run_dir / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    (run_dir / "grid.json").write_text(json.dumps(grid, indent=2) + "\n")
    rows = []
    for i, (a, b, g) in enumerate(expand_grid(grid)):
        upd = {k: v for k, v in (("alpha", a), ("beta", b), ("gamma", g)) if v is not None}
        w = cfg.loss.model_copy(update=upd)
        accs, f1s, errors = [], [], []
        for s in cfg.seeds:
            tr = Trainer(data, specs, cfg.schedule, w, seed=derive_seed(s, i),
                         run_id=f"grid{i}-seed{s}")
            try:
                tr.run()
                last = final_metrics(tr.records)
                accs.append(last.accuracy)
                f1s.append(last.macro_f1)
            except PSKDError as e:
                errors.append(f"seed {s}: {e}")
        am, asd = mean_std(accs)
        fm, fsd = mean_std(f1s)
        rows.append({"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma,
                     "mean_accuracy": am, "std_accuracy": asd, "mean_macro_f1": fm, "std_macro_f1": fsd,
                     "best": 0, "status": "ok" if not errors else "; ".join(errors)})
    ok = [r for r in rows if r["status"] == "ok" and not np.isnan(r["mean_accuracy"])]
    if ok:
        best = min(ok, key=lambda r: (-r["mean_accuracy"], r["alpha"], r["beta"], r["gamma"]))
        best["best"] = 1
    report = run_dir / "report.csv"
    with report.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=GRID_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return report, rows

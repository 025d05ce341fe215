"""CSV and JSON artifacts.

metrics.csv   one row per training iteration, columns METRIC_COLUMNS
summary.json  run summary plus the config it came from
scatter.csv   generated points (run, stage, x, y, d)
sweep.csv     (size, seed, teacher_distance, student_distance, params_student, status)
grid.csv      (arm, seed, final_distance, status)
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .metrics import circle_distance

METRIC_COLUMNS = (
    "run_id", "config_hash", "seed", "step", "stage", "iteration", "loss", "dmd", "adv_g", "adv_d",
    "disc_objective", "fake_fm", "dmd_grad_norm", "clamped", "score_real", "score_fake", "awd_entropy",
    "circle_distance",
)
SCATTER_COLUMNS = ("run", "stage", "x", "y", "d")
SWEEP_COLUMNS = ("size", "seed", "teacher_distance", "student_distance", "params_student", "status")
GRID_COLUMNS = ("arm", "seed", "final_distance", "status")


class ExportError(OSError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows: Iterable[dict], columns) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) for k in columns})
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, doc) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def read_summary(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc


def scatter_rows(run: str, stage: str, points) -> list[dict]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    _, d = circle_distance(pts)
    return [{"run": run, "stage": stage, "x": float(x), "y": float(y), "d": float(di)}
            for (x, y), di in zip(pts, d)]


def write_metrics(rows, path) -> Path:
    return write_csv(path, rows, METRIC_COLUMNS)


def write_record(record, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"metrics": write_metrics(record.rows, out / "metrics.csv")}
    doc = dict(record.summary)
    doc["config"] = record.config.to_dict()
    doc["checkpoints"] = dict(record.checkpoints)
    paths["summary"] = write_json(out / "summary.json", doc)
    rows = [r for stage, pts in record.scatter.items() for r in scatter_rows(record.run_id, stage, pts)]
    paths["scatter"] = write_csv(out / "scatter.csv", rows, SCATTER_COLUMNS)
    return paths


def write_sweep(table, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "table": write_csv(out / "sweep.csv", table.rows, SWEEP_COLUMNS),
        "summary": write_json(out / "sweep_summary.json",
                              {"sizes": table.sizes, "seeds": table.seeds, "medians": table.medians()}),
    }


def write_grid(table, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "table": write_csv(out / "grid.csv", table.rows, GRID_COLUMNS),
        "summary": write_json(out / "grid_summary.json",
                              {"arms": table.arms, "seeds": table.seeds, "medians": table.medians(),
                               "ordering": [{"relation": k, "holds": v} for k, v in table.ordering_report()]}),
    }

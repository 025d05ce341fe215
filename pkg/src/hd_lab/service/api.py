"""HTTP service over the experiment harness.

Jobs run synchronously inside the request; the response carries the run
summary and the paths of everything written.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..flow import euler_sample, trajectory_rows
from ..harness.data import probe_set
from ..harness.experiment import (
    ExperimentConfig, MissingTeacher, ablation_grid, run_pipeline, size_sweep,
)
from ..harness.export import ExportError, scatter_rows, write_csv, write_grid, write_json, write_sweep
from ..harness.metrics import circle_distance
from ..meanflow import one_step_sample
from ..nets import VelocityNet, net_from_dict
from ..theory import convergence_table, format_table, periodic_field, linear_field, verify_all
from . import schemas as s

DEFAULT_OUT = "runs"


def out_root(requested: str | None) -> Path:
    return Path(requested or os.environ.get("HD_LAB_OUT") or DEFAULT_OUT)


def to_config(c: s.Config) -> ExperimentConfig:
    return ExperimentConfig.from_dict(c.model_dump())


def load_generator(path: str) -> tuple[VelocityNet, str]:
    """A net checkpoint or a stage-2 checkpoint; returns (net, stage label)."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise HTTPException(404, f"cannot read checkpoint {path}: {exc}") from exc
    if "generator" in doc:
        return net_from_dict(doc["generator"]), "stage2"
    net = net_from_dict(doc)
    return net, ("td" if "r" in net.conditioning else "teacher")


def sample(net: VelocityNet, x1: np.ndarray, mode: str, steps: int, cfg_scale: float = 0.0, label=None):
    if mode == "auto":
        mode = "one-step" if "r" in net.conditioning else "euler"
    if mode == "one-step":
        if "r" not in net.conditioning:
            raise HTTPException(422, "one-step sampling needs a mean-velocity (t, r) checkpoint")
        c = None if label is None else np.full(len(x1), label)
        return one_step_sample(net, x1, c), None, mode
    if "r" in net.conditioning:
        raise HTTPException(422, "Euler sampling needs an instantaneous-velocity checkpoint")
    cfg = (cfg_scale, np.full(len(x1), label)) if net.class_conditional and label is not None else None
    x, traj = euler_sample(net, x1, steps, cfg)
    return x, traj, mode


def create_app() -> FastAPI:
    app = FastAPI(title="hd-lab", version=__version__)

    def run(cfg: ExperimentConfig, out: str | None) -> s.RunResponse:
        run_dir = out_root(out) / f"{cfg.size}-s{cfg.seed}-{cfg.config_hash()[:8]}"
        try:
            rec = run_pipeline(cfg, run_dir)
        except MissingTeacher as exc:
            raise HTTPException(422, str(exc)) from exc
        except ExportError as exc:
            raise HTTPException(500, str(exc)) from exc
        except FileNotFoundError as exc:
            raise HTTPException(404, f"cannot read checkpoint: {exc}") from exc
        return s.RunResponse(run_id=rec.run_id, out_dir=str(run_dir), summary=rec.summary,
                             checkpoints=rec.checkpoints)

    def checked(fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/train-teacher", response_model=s.RunResponse)
    def train_teacher(req: s.RunRequest):
        cfg = checked(to_config, req.config)
        cfg = checked(cfg.replace, teacher_fm=True, td=False, dmd=False, adversarial="off")
        return run(cfg, req.out)

    @app.post("/distill-td", response_model=s.RunResponse)
    def distill_td(req: s.RunRequest):
        cfg = checked(to_config, req.config)
        cfg = checked(cfg.replace, teacher_fm=cfg.teacher_fm and not cfg.teacher_path, td=True, dmd=False,
                      adversarial="off")
        return run(cfg, req.out)

    @app.post("/refine", response_model=s.RunResponse)
    def refine(req: s.RunRequest):
        cfg = checked(to_config, req.config)
        if not cfg.stage2:
            cfg = checked(cfg.replace, dmd=True)
        if cfg.teacher_path:
            cfg = checked(cfg.replace, teacher_fm=False)
        if cfg.student_path:
            cfg = checked(cfg.replace, td=False)
        return run(cfg, req.out)

    @app.post("/sweep", response_model=s.SweepResponse)
    def sweep(req: s.SweepRequest):
        base = checked(to_config, req.base)
        table = checked(size_sweep, req.sizes, req.seeds, base)
        tag = hashlib.sha256(json.dumps([req.sizes, req.seeds, base.to_dict()], sort_keys=True).encode())
        out_dir = out_root(req.out) / f"sweep-{tag.hexdigest()[:8]}"
        write_sweep(table, out_dir)
        return s.SweepResponse(rows=table.rows, medians=table.medians(), out_dir=str(out_dir))

    @app.post("/ablate", response_model=s.AblateResponse)
    def ablate(req: s.AblateRequest):
        base = checked(to_config, req.base)
        table = checked(ablation_grid, req.seeds, base, req.arms)
        tag = hashlib.sha256(json.dumps([req.seeds, req.arms, base.to_dict()], sort_keys=True).encode())
        out_dir = out_root(req.out) / f"ablate-{tag.hexdigest()[:8]}"
        write_grid(table, out_dir)
        return s.AblateResponse(rows=table.rows, medians=table.medians(),
                                ordering=[{"relation": k, "holds": v} for k, v in table.ordering_report()],
                                out_dir=str(out_dir))

    @app.post("/verify-theory", response_model=s.TheoryResponse)
    def verify_theory():
        report = verify_all()
        table = "v = 2t\n" + format_table(convergence_table(linear_field(), range(0, 13)))
        table += "\n\nv = sin(2 pi t) + 2\n" + format_table(convergence_table(periodic_field(), range(0, 13)))
        return s.TheoryResponse(ok=report.ok, table=table,
                                checks=[s.TheoryCheck(name=n, ok=o, detail=d) for n, o, d in report.checks])

    @app.post("/eval", response_model=s.EvalResponse)
    def evaluate(req: s.EvalRequest):
        net, _ = load_generator(req.checkpoint)
        x, _, mode = sample(net, probe_set(req.probe_size), req.mode, req.steps, req.cfg_scale, req.label)
        return s.EvalResponse(checkpoint=req.checkpoint, mode=mode, steps=req.steps if mode == "euler" else 1,
                              n=len(x), circle_distance=circle_distance(x)[0])

    @app.post("/export", response_model=s.ExportResponse)
    def export(req: s.ExportRequest):
        net, stage = load_generator(req.checkpoint)
        x, traj, _ = sample(net, probe_set(req.n), req.mode, req.steps)
        run_name = req.run or Path(req.checkpoint).parent.name
        rows = scatter_rows(run_name, stage, x)
        out = Path(req.out)
        files = []
        try:
            if req.format in ("csv", "both"):
                files.append(write_csv(out / "samples.csv", rows, ("run", "stage", "x", "y", "d")))
            if req.format in ("json", "both"):
                files.append(write_json(out / "samples.json", {"run": run_name, "stage": stage, "points": rows}))
            if req.trajectory and traj is not None:
                files.append(write_csv(out / "trajectory.csv", trajectory_rows(traj),
                                       ("sample", "step", "t", "x", "y")))
        except ExportError as exc:
            raise HTTPException(500, str(exc)) from exc
        return s.ExportResponse(files=[str(f) for f in files], n=len(rows), circle_distance=circle_distance(x)[0])

    return app


app = create_app()

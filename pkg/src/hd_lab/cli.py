"""Command-line client.

Each subcommand posts one request to the service: in-process by default, or
to a running server with ``--server URL`` (or HD_LAB_SERVER).
"""

from __future__ import annotations

import json
import os
import sys

import click

FLAG_FIELDS = ("size", "seed", "steps", "cfg_scale", "disc", "lambda1", "lambda2", "lambda3")


class Client:
    def __init__(self, server: str | None):
        if server:
            import httpx

            self._http = httpx.Client(base_url=server, timeout=None)
        else:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service.api import app

            self._http = TestClient(app)

    def post(self, path: str, body: dict | None = None) -> dict:
        r = self._http.post(path, json=body or {})
        if r.status_code >= 400:
            try:
                detail = r.json().get("detail", r.text)
            except ValueError:
                detail = r.text
            raise click.ClickException(f"{path} failed ({r.status_code}): {detail}")
        return r.json()


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise click.ClickException("config file must hold a JSON object")
    return doc


def apply_flags(cfg: dict, size, seed, steps, cfg_scale, disc, lambda1, lambda2, lambda3) -> dict:
    """Flags override the config file."""
    cfg = dict(cfg)
    if size is not None:
        cfg["size"] = size
    if seed is not None:
        cfg["seed"] = seed
    if steps is not None:
        cfg["sampler_steps"] = steps
    if cfg_scale is not None:
        cfg["cfg_scale"] = cfg_scale
        if cfg_scale > 0:
            cfg.setdefault("n_classes", 2)
    if disc is not None:
        cfg["adversarial"] = disc
    weights = dict(cfg.get("weights") or {})
    for key, val in (("dmd", lambda1), ("adv_g", lambda2), ("adv_d", lambda3)):
        if val is not None:
            weights[key] = val
    if weights:
        cfg["weights"] = weights
    return cfg


def run_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON config file."),
        click.option("--size", type=click.Choice(["S", "B", "L", "XL", "XXL", "XXXL"])),
        click.option("--seed", type=int),
        click.option("--steps", type=int, help="Euler steps for teacher evaluation."),
        click.option("--cfg-scale", type=float, help="Guidance scale (uses the 2-class problem)."),
        click.option("--disc", type=click.Choice(["off", "gap", "awd"])),
        click.option("--lambda1", type=float, help="Weight of the distribution-matching loss."),
        click.option("--lambda2", type=float, help="Weight of the generator adversarial loss."),
        click.option("--lambda3", type=float, help="Weight of the discriminator loss."),
        click.option("--iters", type=int, help="Iteration budget of the stage being run."),
        click.option("--batch-size", type=int),
        click.option("--teacher", "teacher_path", type=click.Path(dir_okay=False)),
        click.option("--student", "student_path", type=click.Path(dir_okay=False)),
        click.option("--out", type=click.Path(file_okay=False), help="Output root (default $HD_LAB_OUT or ./runs)."),
    ]
    for o in reversed(opts):
        fn = o(fn)
    return fn


def build_config(kw: dict, iters_field: str) -> dict:
    cfg = apply_flags(load_config(kw.get("config_path")), *(kw.get(k) for k in FLAG_FIELDS))
    if kw.get("iters") is not None:
        cfg[iters_field] = kw["iters"]
    for key in ("batch_size", "teacher_path", "student_path"):
        if kw.get(key) is not None:
            cfg[key] = kw[key]
    return cfg


def emit(doc) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


@click.group()
@click.option("--server", envvar="HD_LAB_SERVER", default=None, help="Base URL of a running service.")
@click.pass_context
def main(ctx, server):
    """Toy-scale trajectory distillation and distribution refinement lab."""
    ctx.obj = Client(server)


@main.command("train-teacher")
@run_options
@click.pass_obj
def train_teacher(client, **kw):
    """Train a flow-matching teacher."""
    emit(client.post("/train-teacher", {"config": build_config(kw, "teacher_iters"), "out": kw["out"]}))


@main.command("distill-td")
@run_options
@click.pass_obj
def distill_td(client, **kw):
    """Distill a one-step mean-velocity student (trains a teacher unless --teacher is given)."""
    emit(client.post("/distill-td", {"config": build_config(kw, "td_iters"), "out": kw["out"]}))


@main.command()
@run_options
@click.pass_obj
def refine(client, **kw):
    """Stage-2 refinement (distribution matching, optional adversarial head)."""
    cfg = build_config(kw, "stage2_iters")
    cfg.setdefault("dmd", True)
    emit(client.post("/refine", {"config": cfg, "out": kw["out"]}))


@main.command()
@run_options
@click.option("--sizes", default="S,B,L,XL,XXL,XXXL", show_default=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.pass_obj
def sweep(client, sizes, seeds, **kw):
    """Teacher and student distance across model sizes."""
    base = build_config(kw, "td_iters")
    body = {"sizes": sizes.split(","), "seeds": [int(x) for x in seeds.split(",")], "base": base, "out": kw["out"]}
    emit(client.post("/sweep", body))


@main.command()
@run_options
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--arms", default=None, help="Comma-separated subset of arms.")
@click.pass_obj
def ablate(client, seeds, arms, **kw):
    """Final one-step distance of every ablation arm."""
    base = build_config(kw, "stage2_iters")
    base.setdefault("dmd", True)
    body = {"seeds": [int(x) for x in seeds.split(",")], "arms": arms.split(",") if arms else None,
            "base": base, "out": kw["out"]}
    emit(client.post("/ablate", body))


@main.command("verify-theory")
@click.pass_obj
def verify_theory(client):
    """Closed-form identity checks; exits nonzero if any fails."""
    res = client.post("/verify-theory")
    click.echo(res["table"])
    click.echo("")
    for c in res["checks"]:
        click.echo(f"{'PASS' if c['ok'] else 'FAIL'}  {c['name']}: {c['detail']}")
    if not res["ok"]:
        sys.exit(1)


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["auto", "one-step", "euler"]), default="auto")
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--probe-size", type=int, default=4096, show_default=True)
@click.option("--cfg-scale", type=float, default=0.0)
@click.option("--label", type=int, default=None)
@click.pass_obj
def evaluate(client, checkpoint, mode, steps, probe_size, cfg_scale, label):
    """Mean circle distance of a checkpoint on the probe set."""
    emit(client.post("/eval", {"checkpoint": os.path.abspath(checkpoint), "mode": mode, "steps": steps,
                               "probe_size": probe_size, "cfg_scale": cfg_scale, "label": label}))


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--mode", type=click.Choice(["auto", "one-step", "euler"]), default="auto")
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("-n", "n", type=int, default=1024, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "both"]), default="both")
@click.option("--trajectory", is_flag=True, help="Also write the Euler trajectory.")
@click.pass_obj
def export(client, checkpoint, out, mode, steps, n, fmt, trajectory):
    """Write generated points (run, stage, x, y, d) for plotting."""
    emit(client.post("/export", {"checkpoint": os.path.abspath(checkpoint), "out": os.path.abspath(out),
                                 "mode": mode, "steps": steps, "n": n, "format": fmt, "trajectory": trajectory}))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("hd_lab.service.api:app", host=host, port=port)


if __name__ == "__main__":
    main()

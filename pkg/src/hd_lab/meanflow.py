"""Mean-velocity (MeanFlow) training used as trajectory distillation.

The student u(x, r, t) regresses onto

    u_tgt = v(x_t, t) - (t - r) * d/dt u(x_t, r, t)

where the total time derivative is a forward-mode directional derivative
along (dx, dr, dt) = (v, 0, 1), and the target sits behind a stop-gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .flow import interpolate, path_velocity, teacher_velocity_cfg
from .harness.data import ToyDataset
from .harness.metrics import circle_distance
from .nets import Model, VelocityNet, bind, eval_net, input_nodes, model_graph, model_key, net_inputs
from .optim import Adam

log = logging.getLogger(__name__)

VELOCITY_SOURCES = ("ground-truth", "teacher")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MFConfig:
    r_neq_t_ratio: float = 1.0
    velocity_source: str = "teacher"
    cfg_scale: float = 0.0
    batch_size: int = 128

    def __post_init__(self):
        if not 0.0 <= self.r_neq_t_ratio <= 1.0:
            raise ValueError("r_neq_t_ratio must lie in [0, 1]")
        if self.velocity_source not in VELOCITY_SOURCES:
            raise ValueError(f"velocity_source must be one of {VELOCITY_SOURCES}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be nonnegative")


@dataclass
class MFBatch:
    x0: np.ndarray
    x1: np.ndarray
    r: np.ndarray
    t: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.r > self.t):
            raise ValueError("r must not exceed t")
        if np.any(self.r < 0) or np.any(self.t > 1):
            raise ValueError("r and t must lie in [0, 1]")

    @property
    def x_t(self) -> np.ndarray:
        return interpolate(self.x0, self.x1, self.t)


def sample_rt(rng: np.random.Generator, n: int, ratio: float = 1.0):
    """t ~ U[0, 1]; r ~ U[0, t] on a ``ratio`` fraction of rows, r = t elsewhere."""
    t = rng.uniform(0.0, 1.0, size=n)
    r = rng.uniform(0.0, 1.0, size=n) * t
    keep_equal = rng.uniform(size=n) >= ratio
    r[keep_equal] = t[keep_equal]
    return r, t


@lru_cache(maxsize=128)
def _mf_record(key, batch: int) -> ad.Record:
    rec = ad.Record()
    x, t, r, c = input_nodes(rec, key, batch)
    if r is None:
        raise ValueError("mean-velocity model must be conditioned on r")
    v = rec.leaf("v", x.shape)
    dudt = rec.leaf("dudt", x.shape)
    u = model_graph(key, rec, x, t, r, c).out
    target = v - (t - r).reshape(batch, 1) * dudt
    diff = u - ad.stop_gradient(target)
    rec.output("u", u)
    rec.output("target", target)
    rec.output("loss", (diff * diff).sum(axis=-1).mean())
    return rec


def _target_eval(u_net: Model, v, x_t, r, t, c=None) -> ad.Evaluation:
    x_t = ad.as_tensor(x_t)
    n = x_t.shape[0]
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (n,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if np.any(r > t):
        raise ValueError("r must not exceed t")
    v = ad.as_tensor(v)
    leaves = net_inputs(u_net, x_t, t, r, c)
    leaves.update(bind(u_net))
    leaves["v"] = v
    leaves["dudt"] = np.zeros_like(x_t)
    rec = _mf_record(model_key(u_net), n)
    _, tangents, ev = ad.jvp(rec, leaves, {"x": v, "t": np.ones(n), "r": np.zeros(n)}, with_evaluation=True)
    return ad.update(ev, {"dudt": tangents["u"]})


def mean_velocity_target(u_net: Model, v, x_t, r, t, c=None) -> np.ndarray:
    """Stop-gradient regression target v - (t - r) du/dt."""
    return _target_eval(u_net, v, x_t, r, t, c)["target"]


def velocity_for(batch: MFBatch, config: MFConfig, teacher: Model | None) -> np.ndarray:
    if config.velocity_source == "ground-truth":
        return path_velocity(batch.x0, batch.x1)
    if teacher is None:
        raise ValueError("teacher velocity source needs a teacher")
    if getattr(teacher, "class_conditional", False):
        return teacher_velocity_cfg(teacher, batch.x_t, batch.t, batch.c, config.cfg_scale)
    return eval_net(teacher, batch.x_t, batch.t)


def mf_loss(u_net: Model, batch: MFBatch, config: MFConfig | None = None, teacher: Model | None = None,
            v: np.ndarray | None = None) -> float:
    config = config or MFConfig(velocity_source="ground-truth")
    v = velocity_for(batch, config, teacher) if v is None else v
    return float(_target_eval(u_net, v, batch.x_t, batch.r, batch.t, batch.c)["loss"])


def mf_loss_and_grad(u_net: VelocityNet, batch: MFBatch, config: MFConfig | None = None,
                     teacher: Model | None = None, v: np.ndarray | None = None):
    config = config or MFConfig(velocity_source="ground-truth")
    v = velocity_for(batch, config, teacher) if v is None else v
    ev = _target_eval(u_net, v, batch.x_t, batch.r, batch.t, batch.c)
    grads = ad.backward(ev, {"loss": np.array(1.0)}, wrt=["net." + k for k in u_net.params])
    return float(ev["loss"]), grads


def one_step_sample(u_net: Model, x1, c=None) -> np.ndarray:
    """x0 = x1 - u(x1, 0, 1)."""
    x1 = ad.as_tensor(x1)
    return x1 - eval_net(u_net, x1, 1.0, 0.0, c)


def draw_batch(rng: np.random.Generator, dataset: ToyDataset, config: MFConfig) -> MFBatch:
    n = config.batch_size
    x0, c = dataset.target(rng, n)
    x1 = dataset.prior(rng, n)
    r, t = sample_rt(rng, n, config.r_neq_t_ratio)
    return MFBatch(x0, x1, r, t, c)


def distill_stage1(
    student: VelocityNet,
    teacher: Model | None,
    dataset: ToyDataset,
    config: MFConfig,
    iterations: int,
    lr: float | None = None,
    betas=(0.9, 0.95),
    seed: int = 0,
    probe: np.ndarray | None = None,
    eval_every: int = 0,
    callback: Callable[[dict], None] | None = None,
    ema_decay: float | None = None,
):
    """Train ``student`` in place on the mean-velocity objective.

    Returns ``(student, rows)`` where rows are per-iteration metric dicts.
    With ``ema_decay`` the student ends with the moving average of its
    weights.
    """
    if config.velocity_source == "teacher" and teacher is None:
        raise ValueError("teacher distillation needs a teacher")
    rng = np.random.default_rng(seed)
    opt = Adam(student.params, student.config.learning_rate if lr is None else lr, betas, prefix="net.",
               ema_decay=ema_decay)
    rows = []
    for it in range(1, iterations + 1):
        batch = draw_batch(rng, dataset, config)
        loss, grads = mf_loss_and_grad(student, batch, config, teacher)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"mean-velocity loss became {loss} at iteration {it}")
        opt.step(grads)
        row = {"iteration": it, "stage": "td", "loss": loss}
        if probe is not None and eval_every and (it % eval_every == 0 or it == iterations):
            row["circle_distance"] = circle_distance(one_step_sample(student, probe))[0]
        rows.append(row)
        if callback:
            callback(row)
    opt.load_average()
    return student, rows


def gradient_variance(student: VelocityNet, teacher: Model | None, dataset: ToyDataset, config: MFConfig,
                      n_batches: int = 8, seed: int = 0) -> float:
    """Mean per-parameter variance of the loss gradient across fresh batches."""
    rng = np.random.default_rng(seed)
    flat = []
    for _ in range(n_batches):
        _, g = mf_loss_and_grad(student, draw_batch(rng, dataset, config), config, teacher)
        flat.append(np.concatenate([g[k].ravel() for k in sorted(g)]))
    return float(np.var(np.stack(flat), axis=0).mean())

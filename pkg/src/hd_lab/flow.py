"""Linear-path flow matching: interpolation, the regression loss, Euler
sampling of the probability-flow ODE and classifier-free guided velocity."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .nets import Model, bind, eval_net, input_nodes, model_graph, model_key, net_inputs


def _t_column(t, x):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return t.reshape(-1, 1) if t.ndim == 1 and np.ndim(x) == 2 else t


def interpolate(x0, x1, t) -> np.ndarray:
    """x_t = (1 - t) x0 + t x1; ``t`` is a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    tc = _t_column(t, x0)
    return (1.0 - tc) * x0 + tc * x1


def path_velocity(x0, x1) -> np.ndarray:
    return np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)


@lru_cache(maxsize=128)
def _fm_record(key, batch: int) -> ad.Record:
    rec = ad.Record()
    x, t, r, c = input_nodes(rec, key, batch)
    target = rec.leaf("v", x.shape)
    out = model_graph(key, rec, x, t, r, c).out
    diff = out - target
    rec.output("loss", (diff * diff).sum(axis=-1).mean())
    return rec


def _fm_eval(net: Model, x0, x1, t, c):
    x0 = ad.as_tensor(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    xt = interpolate(x0, x1, t)
    leaves = net_inputs(net, xt, t, c=c)
    leaves["v"] = path_velocity(x0, x1)
    leaves.update(bind(net))
    return ad.forward(_fm_record(model_key(net), x0.shape[0]), leaves)


def fm_loss(net: Model, x0, x1, t, c=None) -> float:
    """Mean squared error between the predicted and the path velocity."""
    return float(_fm_eval(net, x0, x1, t, c)["loss"])


def fm_loss_and_grad(net: Model, x0, x1, t, c=None, prefix: str = "net."):
    ev = _fm_eval(net, x0, x1, t, c)
    grads = ad.backward(ev, wrt=[prefix + k for k in net.params]) if net.params else {}
    return float(ev["loss"]), grads


def time_grid(steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.linspace(1.0, 0.0, steps + 1)


def guided_velocity_fn(net: Model, cfg: tuple[float, object] | None):
    """Velocity callable (x, t) -> v, optionally classifier-free guided."""
    if cfg is None:
        return lambda x, t: eval_net(net, x, t)
    w, c = cfg
    return lambda x, t: teacher_velocity_cfg(net, x, t, c, w)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    method: str = "euler"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method != "euler":
            raise ValueError("only the Euler sampler is provided")


def euler_sample(net: Model, x1, steps: int = 50, cfg: tuple[float, object] | None = None):
    """Integrate dx/dt = v(x, t) from t=1 to t=0 with uniform Euler steps.

    Returns the final state and the trajectory of shape (steps + 1, n, dim).
    """
    x = ad.as_tensor(x1).copy()
    grid = time_grid(steps)
    v = guided_velocity_fn(net, cfg)
    traj = np.empty((steps + 1,) + x.shape)
    traj[0] = x
    for k in range(steps):
        t, t_next = grid[k], grid[k + 1]
        x = x - (t - t_next) * v(x, t)
        traj[k + 1] = x
    return x, traj


def teacher_velocity_cfg(teacher: Model, x_t, t, c, w: float) -> np.ndarray:
    """(1 + w) F(x_t, t, c) - w F(x_t, t, null)."""
    if w < 0:
        raise ValueError("guidance scale must be nonnegative")
    cond = eval_net(teacher, x_t, t, c=c)
    if w == 0:
        return cond
    uncond = eval_net(teacher, x_t, t, c=None)
    return (1.0 + w) * cond - w * uncond


def trajectory_rows(traj: np.ndarray):
    """Long-format rows (sample, step, t, x, y) for CSV export."""
    steps = traj.shape[0] - 1
    grid = time_grid(steps)
    for k in range(steps + 1):
        for i, (px, py) in enumerate(traj[k]):
            yield {"sample": i, "step": k, "t": float(grid[k]), "x": float(px), "y": float(py)}


def train_teacher(
    net,
    dataset,
    iterations: int,
    lr: float | None = None,
    batch_size: int = 128,
    betas=(0.9, 0.95),
    seed: int = 0,
    class_dropout: float = 0.1,
    probe: np.ndarray | None = None,
    eval_every: int = 0,
    eval_steps: int = 50,
    callback=None,
    ema_decay: float | None = None,
):
    """Fit ``net`` in place with the flow-matching loss; returns (net, rows).

    For class-conditional nets a ``class_dropout`` fraction of labels is
    replaced by the null class so the same net also learns the unconditional
    velocity. With ``ema_decay`` the net ends with the moving average of
    its weights.
    """
    import math

    from .harness.metrics import circle_distance
    from .optim import Adam

    rng = np.random.default_rng(seed)
    opt = Adam(net.params, net.config.learning_rate if lr is None else lr, betas, prefix="net.",
               ema_decay=ema_decay)
    rows = []
    for it in range(1, iterations + 1):
        x0, c = dataset.target(rng, batch_size)
        x1 = dataset.prior(rng, batch_size)
        t = rng.uniform(0.0, 1.0, size=batch_size)
        if c is not None:
            c = np.where(rng.uniform(size=batch_size) < class_dropout, net.null_class, c)
        loss, grads = fm_loss_and_grad(net, x0, x1, t, c)
        if not math.isfinite(loss):
            from .meanflow import TrainingDiverged

            raise TrainingDiverged(f"flow-matching loss became {loss} at iteration {it}")
        opt.step(grads)
        row = {"iteration": it, "stage": "teacher", "loss": loss}
        if probe is not None and eval_every and (it % eval_every == 0 or it == iterations):
            row["circle_distance"] = circle_distance(euler_sample(net, probe, eval_steps)[0])[0]
        rows.append(row)
        if callback:
            callback(row)
    opt.load_average()
    return net, rows

"""Distribution matching against a frozen real score branch and a trained
fake score branch.

Both branches are velocity nets on the linear path, so a velocity F at
(x_t, t) corresponds to the data prediction x_t - t F. The per-sample
direction

    grad = t (F_real - F_fake) / max(|x0_hat - x_t + t F_real|, eps)

is the difference of the two branches' data predictions (fake minus real)
scaled by the real branch's prediction error. Descending
mean |x0_hat - sg(x0_hat - grad)|^2 moves generated samples toward the real
branch's prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .flow import fm_loss_and_grad, interpolate
from .nets import Model, VelocityNet, bind, eval_net, input_nodes, model_graph, model_key, net_inputs
from .optim import Adam

log = logging.getLogger(__name__)

NORM_EPS = 1e-6
STAGE2_T_RANGE = (0.02, 0.98)


class RealBranchModified(RuntimeError):
    pass


@dataclass
class ScoreBranches:
    """Frozen real branch and trainable fake branch, both started from the teacher."""

    real: Model
    fake: Model
    real_checksum: str = ""

    @classmethod
    def from_teacher(cls, teacher: Model) -> "ScoreBranches":
        fake = teacher.copy() if isinstance(teacher, VelocityNet) else teacher
        return cls(teacher, fake, _checksum(teacher))

    def verify_real(self) -> None:
        if self.real_checksum and _checksum(self.real) != self.real_checksum:
            raise RealBranchModified("real score branch parameters changed")


def _checksum(model: Model) -> str:
    return model.checksum() if isinstance(model, VelocityNet) else ""


@dataclass
class DMDGradSample:
    x_hat0: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    grad: np.ndarray
    normalizer: np.ndarray
    clamped: np.ndarray = field(repr=False)

    @property
    def n_clamped(self) -> int:
        return int(self.clamped.sum())


def sample_stage2_t(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(*STAGE2_T_RANGE, size=n)


def dmd_grad(branches: ScoreBranches, x_hat0, t, noise, c=None, eps: float = NORM_EPS) -> DMDGradSample:
    """Per-sample matching direction, a constant with respect to the generator."""
    x_hat0 = ad.as_tensor(x_hat0)
    n = x_hat0.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in (0, 1]")
    x_t = interpolate(x_hat0, noise, t)
    f_real = eval_net(branches.real, x_t, t, c=c)
    f_fake = eval_net(branches.fake, x_t, t, c=c)
    tc = t[:, None]
    norm = np.linalg.norm(x_hat0 - x_t + tc * f_real, axis=-1)
    clamped = norm < eps
    if clamped.any():
        log.debug("dmd normaliser clamped on %d of %d samples", int(clamped.sum()), n)
    grad = tc * (f_real - f_fake) / np.maximum(norm, eps)[:, None]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite matching direction")
    return DMDGradSample(x_hat0, t, x_t, grad, norm, clamped)


# generator in one-step mode: x0_hat = x1 - u(x1, r=0, t=1)

def generator_graph(key, rec: ad.Record, batch: int, prefix: str = "gen."):
    """x0_hat node plus the generator's input leaves (named ``prefix`` + x/t/r/c)."""
    x1, t, r, c = input_nodes(rec, key, batch, prefix=prefix)
    u = model_graph(key, rec, x1, t, r, c, prefix=prefix + "net.").out
    return x1 - u


def generator_leaves(generator: Model, x1, c=None, prefix: str = "gen.") -> dict[str, np.ndarray]:
    x1 = ad.as_tensor(x1)
    leaves = net_inputs(generator, x1, 1.0, 0.0 if "r" in generator.conditioning else None, c, prefix=prefix)
    leaves.update(bind(generator, prefix + "net."))
    return leaves


def generate(generator: Model, x1, c=None) -> np.ndarray:
    x1 = ad.as_tensor(x1)
    r = 0.0 if "r" in generator.conditioning else None
    return x1 - eval_net(generator, x1, 1.0, r, c)


def matching_term(rec: ad.Record, x_hat0: ad.Node, grad: ad.Node) -> ad.Node:
    diff = x_hat0 - ad.stop_gradient(x_hat0 - grad)
    return (diff * diff).sum(axis=-1).mean()


@lru_cache(maxsize=64)
def _dmd_record(key, batch: int) -> ad.Record:
    rec = ad.Record()
    x_hat0 = generator_graph(key, rec, batch)
    g = rec.leaf("grad", x_hat0.shape)
    rec.output("x_hat0", x_hat0)
    rec.output("loss", matching_term(rec, x_hat0, g))
    return rec


def _dmd_eval(generator: Model, grad, x1, c=None) -> ad.Evaluation:
    x1 = ad.as_tensor(x1)
    leaves = generator_leaves(generator, x1, c)
    leaves["grad"] = ad.as_tensor(grad)
    return ad.forward(_dmd_record(model_key(generator), x1.shape[0]), leaves)


def dmd_loss(generator: Model, branches: ScoreBranches, x1, t, noise, c=None) -> float:
    """mean |x0_hat - sg(x0_hat - grad)|^2 for a batch of (x1, t, noise)."""
    return dmd_loss_and_grad(generator, branches, x1, t, noise, c, want_grads=False)[0]


def dmd_loss_and_grad(generator: Model, branches: ScoreBranches, x1, t, noise, c=None, want_grads: bool = True):
    """Returns (loss, parameter gradients keyed ``gen.net.*``, DMDGradSample)."""
    x_hat0 = generate(generator, x1, c)
    sample = dmd_grad(branches, x_hat0, t, noise, c)
    ev = _dmd_eval(generator, sample.grad, x1, c)
    grads = {}
    if want_grads and generator.params:
        grads = ad.backward(ev, {"loss": np.array(1.0)}, wrt=["gen.net." + k for k in generator.params])
    return float(ev["loss"]), grads, sample


def fake_branch_step(branches: ScoreBranches, generator: Model, x1, noise, t, optimizer: Adam, c=None) -> float:
    """One flow-matching step on the fake branch with data := generator samples."""
    x_hat0 = generate(generator, x1, c)
    loss, grads = fm_loss_and_grad(branches.fake, x_hat0, noise, t, c)
    optimizer.step(grads)
    return loss


def fake_optimizer(branches: ScoreBranches, lr: float, betas=(0.9, 0.95)) -> Adam:
    return Adam(branches.fake.params, lr, betas, prefix="net.")

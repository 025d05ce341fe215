"""Adversarial refinement in the teacher's feature space and the combined
Stage-2 training loop (distribution matching plus hinge GAN)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .dmd import (
    ScoreBranches, dmd_grad, fake_optimizer, generate, generator_graph, generator_leaves, matching_term,
    sample_stage2_t,
)
from .flow import fm_loss_and_grad, interpolate
from .harness.data import ToyDataset
from .harness.metrics import circle_distance
from .meanflow import TrainingDiverged, one_step_sample
from .nets import (
    DiscriminatorHead, Model, VelocityNet, bind, bind_disc, disc_graph, input_nodes, model_graph, model_key,
    net_inputs,
)
from .optim import Adam


@dataclass(frozen=True)
class LossWeights:
    dmd: float = 1.0
    adv_g: float = 0.05
    adv_d: float = 0.01

    def __post_init__(self):
        for name in ("dmd", "adv_g", "adv_d"):
            v = getattr(self, name)
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError(f"loss weight {name} must be a nonnegative float, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.dmd * k, self.adv_g * k, self.adv_d * k)


def stage2_total_loss(weights: LossWeights, dmd_loss: float, adv_g: float, adv_d: float) -> tuple[float, float]:
    """(generator objective, discriminator objective)."""
    return weights.dmd * dmd_loss + weights.adv_g * adv_g, weights.adv_d * adv_d


# ---------------------------------------------------------------------------
# features

@dataclass(frozen=True)
class FeatureExtractor:
    """Hidden activations of selected teacher blocks, used as tokens."""

    teacher: VelocityNet
    blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.blocks is not None:
            if len(self.blocks) == 0:
                raise ValueError("no blocks selected")
            bad = [b for b in self.blocks if not 0 <= b < self.teacher.config.layers]
            if bad:
                raise ValueError(f"block indices out of range: {bad}")

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(range(self.teacher.config.layers)) if self.blocks is None else tuple(self.blocks)

    @property
    def n_tokens(self) -> int:
        return len(self.selected)

    @property
    def token_dim(self) -> int:
        return self.teacher.config.hidden_dim


def feature_graph(extractor_key, rec: ad.Record, x: ad.Node, t: ad.Node, c: ad.Node | None,
                  prefix: str = "feat.") -> ad.Node:
    """(batch, n_tokens, hidden) token node from the teacher evaluated at (x, t)."""
    key, blocks = extractor_key
    g = model_graph(key, rec, x, t, None, c, prefix=prefix + "net.")
    return ad.stack([g.tokens[i] for i in blocks], axis=1)


def _extractor_key(ex: FeatureExtractor):
    return (model_key(ex.teacher), ex.selected)


@lru_cache(maxsize=64)
def _feature_record(ekey, batch: int) -> ad.Record:
    rec = ad.Record()
    x, t, r, c = input_nodes(rec, ekey[0], batch)
    rec.output("tokens", feature_graph(ekey, rec, x, t, c))
    return rec


def extract_features(extractor: FeatureExtractor, x, t, c=None) -> np.ndarray:
    x = ad.as_tensor(x)
    leaves = net_inputs(extractor.teacher, x, t, None, c)
    leaves.update(bind(extractor.teacher, "feat.net."))
    return ad.forward(_feature_record(_extractor_key(extractor), x.shape[0]), leaves)["tokens"]


def _disc_shapes(disc: DiscriminatorHead):
    return tuple(sorted((k, v.shape) for k, v in disc.params.items()))


def _disc_shell(variant: str, pshapes) -> DiscriminatorHead:
    return DiscriminatorHead(variant, {k: np.zeros(s) for k, s in pshapes}, {})


# ---------------------------------------------------------------------------
# losses

def hinge_terms(real_scores, fake_scores) -> tuple[float, float]:
    real_scores = np.asarray(real_scores, dtype=np.float64)
    fake_scores = np.asarray(fake_scores, dtype=np.float64)
    return float(np.maximum(0.0, 1.0 - real_scores).mean()), float(np.maximum(0.0, 1.0 + fake_scores).mean())


@lru_cache(maxsize=64)
def _disc_loss_record(variant: str, pshapes, token_shape: tuple) -> ad.Record:
    rec = ad.Record()
    shell = _disc_shell(variant, pshapes)
    p = {k: rec.leaf("disc." + k, s) for k, s in pshapes}
    real = disc_graph(shell, rec, rec.leaf("tokens_real", token_shape), params=p)
    fake = disc_graph(shell, rec, rec.leaf("tokens_fake", token_shape), params=p)
    loss = ad.relu(1.0 - real.score).mean() + ad.relu(1.0 + fake.score).mean()
    rec.output("loss", loss)
    rec.output("real_score", real.score)
    rec.output("fake_score", fake.score)
    rec.output("weights", fake.weights)
    return rec


def noised_pair(extractor: FeatureExtractor, generator: Model, x_real, x1, t, noise, c=None):
    """Tokens of noised real samples and of generator samples noised at the same t."""
    x_fake = generate(generator, x1, c)
    tok_real = extract_features(extractor, interpolate(x_real, noise, t), t, c)
    tok_fake = extract_features(extractor, interpolate(x_fake, noise, t), t, c)
    return tok_real, tok_fake


def _disc_eval(disc: DiscriminatorHead, tok_real, tok_fake, refresh_sn: bool = False) -> ad.Evaluation:
    rec = _disc_loss_record(disc.variant, _disc_shapes(disc), tuple(tok_real.shape))
    leaves = bind_disc(disc, refresh_sn=refresh_sn)
    leaves["tokens_real"] = tok_real
    leaves["tokens_fake"] = tok_fake
    return ad.forward(rec, leaves)


def adv_discriminator_loss(disc: DiscriminatorHead, extractor: FeatureExtractor, generator: Model, x_real, x1, t,
                           noise, c=None) -> float:
    """Hinge loss mean relu(1 - D(real)) + mean relu(1 + D(fake)); never negative."""
    tok_real, tok_fake = noised_pair(extractor, generator, x_real, x1, t, noise, c)
    return float(_disc_eval(disc, tok_real, tok_fake)["loss"])


def discriminator_loss_and_grad(disc: DiscriminatorHead, tok_real, tok_fake, refresh_sn: bool = True):
    ev = _disc_eval(disc, tok_real, tok_fake, refresh_sn)
    grads = ad.backward(ev, {"loss": np.array(1.0)}, wrt=["disc." + k for k in disc.params])
    return float(ev["loss"]), grads, ev


@lru_cache(maxsize=64)
def _generator_record(gkey, ekey, disc_key, batch: int, with_adv: bool) -> ad.Record:
    rec = ad.Record()
    x_hat0 = generator_graph(gkey, rec, batch)
    rec.output("x_hat0", x_hat0)
    dmd = matching_term(rec, x_hat0, rec.leaf("grad", x_hat0.shape))
    rec.output("dmd", dmd)
    total = rec.leaf("w.dmd", ()) * dmd
    if with_adv:
        _, t, _, c = input_nodes(rec, ekey[0], batch, prefix="feat.")
        noise = rec.leaf("noise", x_hat0.shape)
        tc = t.reshape(batch, 1)
        x_t = (1.0 - tc) * x_hat0 + tc * noise
        tokens = feature_graph(ekey, rec, x_t, t, c)
        variant, pshapes = disc_key
        score = disc_graph(_disc_shell(variant, pshapes), rec, tokens).score
        adv = -score.mean()
        rec.output("adv", adv)
        total = total + rec.leaf("w.adv", ()) * adv
    rec.output("total", total)
    return rec


def generator_objective(generator: Model, branches: ScoreBranches, weights: LossWeights, x1, t, noise,
                        disc: DiscriminatorHead | None = None, extractor: FeatureExtractor | None = None,
                        c=None, want_grads: bool = True):
    """lambda1 * matching loss + lambda2 * (-mean D(fake tokens)).

    Returns (components dict, generator gradients keyed ``gen.net.*``). The
    adversarial term is only built when a discriminator is given and its
    weight is nonzero.
    """
    x1 = ad.as_tensor(x1)
    n = x1.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    x_hat0 = generate(generator, x1, c)
    sample = dmd_grad(branches, x_hat0, t, noise, c)
    with_adv = disc is not None and weights.adv_g > 0.0
    if with_adv and extractor is None:
        raise ValueError("adversarial term needs a feature extractor")
    ekey = _extractor_key(extractor) if with_adv else None
    dkey = (disc.variant, _disc_shapes(disc)) if with_adv else None
    rec = _generator_record(model_key(generator), ekey, dkey, n, with_adv)
    leaves = generator_leaves(generator, x1, c)
    leaves["grad"] = sample.grad
    leaves["w.dmd"] = np.array(weights.dmd)
    if with_adv:
        leaves.update(net_inputs(extractor.teacher, x_hat0, t, None, c, prefix="feat."))
        leaves.update(bind(extractor.teacher, "feat.net."))
        leaves.update(bind_disc(disc))
        leaves["noise"] = ad.as_tensor(noise)
        leaves["w.adv"] = np.array(weights.adv_g)
    ev = ad.forward(rec, leaves)
    out = {"dmd": float(ev["dmd"]), "adv_g": float(ev["adv"]) if with_adv else 0.0, "total": float(ev["total"]),
           "grad_norm": float(np.linalg.norm(sample.grad, axis=-1).mean()), "clamped": sample.n_clamped}
    grads = {}
    if want_grads and generator.params:
        grads = ad.backward(ev, {"total": np.array(1.0)}, wrt=["gen.net." + k for k in generator.params])
    return out, grads


def adv_generator_loss(disc: DiscriminatorHead, extractor: FeatureExtractor, generator: Model, x1, t, noise,
                       c=None) -> float:
    """-mean D(tokens of generated samples noised at t)."""
    x_fake = generate(generator, x1, c)
    tok = extract_features(extractor, interpolate(x_fake, noise, t), t, c)
    pshapes = _disc_shapes(disc)
    rec = _disc_loss_record(disc.variant, pshapes, tuple(tok.shape))
    leaves = bind_disc(disc)
    leaves["tokens_real"] = tok
    leaves["tokens_fake"] = tok
    return -float(ad.forward(rec, leaves)["fake_score"].mean())


def awd_entropy(weights: np.ndarray) -> float:
    w = np.clip(np.asarray(weights, dtype=np.float64), 1e-300, None)
    return float(-(w * np.log(w)).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# stage-2 loop

@dataclass(frozen=True)
class Stage2Config:
    iterations: int = 10_000
    batch_size: int = 128
    weights: LossWeights = LossWeights()
    disc: str = "off"  # off | gap | awd
    lr: float | None = None
    fake_lr: float | None = None
    disc_lr_ratio: float = 5.0
    fake_steps: int = 1
    betas: tuple[float, float] = (0.9, 0.95)
    blocks: tuple[int, ...] | None = None
    ema_decay: float | None = None

    def __post_init__(self):
        if self.disc not in ("off", "gap", "awd"):
            raise ValueError("disc must be one of off, gap, awd")
        if self.iterations < 0 or self.batch_size < 1 or self.fake_steps < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and fake_steps >= 1 required")


def refine(
    generator: VelocityNet,
    teacher: VelocityNet,
    dataset: ToyDataset,
    config: Stage2Config,
    seed: int = 0,
    probe: np.ndarray | None = None,
    eval_every: int = 0,
    disc: DiscriminatorHead | None = None,
    callback: Callable[[dict], None] | None = None,
):
    """Stage 2: alternate fake-branch, generator and discriminator updates.

    ``generator`` is trained in place. The discriminator draws from its own
    random stream so switching the adversarial weights to zero leaves the
    generator's trajectory unchanged bit for bit.
    Returns (generator, branches, disc, rows).
    """
    from .nets import build_discriminator

    rng = np.random.default_rng(seed)
    rng_d = np.random.default_rng([seed, 1])
    branches = ScoreBranches.from_teacher(teacher)
    lr = generator.config.learning_rate if config.lr is None else config.lr
    fake_opt = fake_optimizer(branches, lr if config.fake_lr is None else config.fake_lr, config.betas)
    gen_opt = Adam(generator.params, lr, config.betas, prefix="gen.net.", ema_decay=config.ema_decay)
    extractor = None
    disc_opt = None
    if config.disc != "off":
        extractor = FeatureExtractor(teacher, config.blocks)
        if disc is None:
            disc = build_discriminator(config.disc, extractor.token_dim, seed=seed + 7)
        disc_opt = Adam(disc.params, lr * config.disc_lr_ratio, config.betas, prefix="disc.")
    n = config.batch_size
    rows = []
    for it in range(1, config.iterations + 1):
        fake_losses = []
        for _ in range(config.fake_steps):
            x1 = dataset.prior(rng, n)
            noise = dataset.prior(rng, n)
            t = rng.uniform(0.0, 1.0, size=n)
            x_hat0 = generate(generator, x1)
            loss_f, g_f = fm_loss_and_grad(branches.fake, x_hat0, noise, t)
            fake_opt.step(g_f)
            fake_losses.append(loss_f)

        x1 = dataset.prior(rng, n)
        noise = dataset.prior(rng, n)
        t = sample_stage2_t(rng, n)
        comp, g_gen = generator_objective(generator, branches, config.weights, x1, t, noise, disc, extractor)
        if not math.isfinite(comp["total"]):
            raise TrainingDiverged(f"stage-2 generator objective became {comp['total']} at iteration {it}")
        gen_opt.step(g_gen)
        row = {"iteration": it, "stage": "stage2", "loss": comp["total"], "dmd": comp["dmd"],
               "adv_g": comp["adv_g"], "fake_fm": float(np.mean(fake_losses)), "dmd_grad_norm": comp["grad_norm"],
               "clamped": comp["clamped"]}

        if disc is not None:
            x_real, _ = dataset.target(rng_d, n)
            x1_d = dataset.prior(rng_d, n)
            noise_d = dataset.prior(rng_d, n)
            t_d = sample_stage2_t(rng_d, n)
            tok_real, tok_fake = noised_pair(extractor, generator, x_real, x1_d, t_d, noise_d)
            loss_d, g_d, ev_d = discriminator_loss_and_grad(disc, tok_real, tok_fake)
            if config.weights.adv_d > 0.0:
                disc_opt.step({k: config.weights.adv_d * v for k, v in g_d.items()})
            _, adv_d_obj = stage2_total_loss(config.weights, 0.0, 0.0, loss_d)
            row.update({"adv_d": loss_d, "disc_objective": adv_d_obj,
                        "score_real": float(ev_d["real_score"].mean()),
                        "score_fake": float(ev_d["fake_score"].mean()),
                        "awd_entropy": awd_entropy(ev_d["weights"])})
        if probe is not None and eval_every and (it % eval_every == 0 or it == config.iterations):
            row["circle_distance"] = circle_distance(one_step_sample(generator, probe))[0]
        rows.append(row)
        if callback:
            callback(row)
    gen_opt.load_average()
    branches.verify_real()
    return generator, branches, disc, rows


def token_gradient_concentration(disc: DiscriminatorHead, tokens: np.ndarray, token_index: int) -> float:
    """Fraction of the score gradient's norm that falls on one token (diagnostic)."""
    toks = ad.as_tensor(tokens)
    pshapes = _disc_shapes(disc)
    rec = _disc_loss_record(disc.variant, pshapes, tuple(toks.shape))
    leaves = bind_disc(disc)
    leaves["tokens_real"] = toks
    leaves["tokens_fake"] = toks
    ev = ad.forward(rec, leaves)
    g = ad.backward(ev, {"fake_score": np.ones(toks.shape[0])}, wrt=["tokens_fake"])["tokens_fake"]
    per = np.linalg.norm(g, axis=-1).sum(axis=0)
    return float(per[token_index] / per.sum()) if per.sum() > 0 else 0.0

"""Residual MLP velocity networks and the discriminator heads.

One :class:`VelocityNet` class covers every network role in the pipeline:
the flow-matching teacher (conditioned on ``t``), the mean-velocity student
(conditioned on ``t`` and ``r``) and the fake score branch. Class-conditional
variants add a learned class table whose last row is the null condition.

Graph builders (``velocity_graph``, ``disc_graph``) emit nodes into an
:class:`~hd_lab.autodiff.Record` so losses can be composed across nets; the
plain evaluation helpers wrap them with cached records.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Record


@dataclass(frozen=True)
class SizeConfig:
    label: str
    hidden_dim: int
    layers: int
    learning_rate: float

    def __post_init__(self):
        if self.hidden_dim < 1 or self.layers < 1:
            raise ValueError("hidden_dim and layers must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


SIZES: dict[str, SizeConfig] = {
    c.label: c
    for c in (
        SizeConfig("S", 32, 1, 1e-3),
        SizeConfig("B", 64, 2, 1e-3),
        SizeConfig("L", 64, 4, 5e-4),
        SizeConfig("XL", 64, 8, 1e-4),
        SizeConfig("XXL", 64, 16, 1e-4),
        SizeConfig("XXXL", 64, 32, 7e-5),
    )
}

# reference parameter counts for the canonical sizes
REFERENCE_PARAMS = {"S": 5540, "B": 29630, "L": 46270, "XL": 79550, "XXL": 146110, "XXXL": 279230}


def size_config(label: str) -> SizeConfig:
    try:
        return SIZES[label.upper()]
    except KeyError:
        raise ValueError(f"unknown size {label!r}; expected one of {list(SIZES)}") from None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def embed_freqs(n: int) -> np.ndarray:
    return np.geomspace(1.0, 100.0, n)


# ---------------------------------------------------------------------------
# velocity nets


@dataclass
class VelocityNet:
    config: SizeConfig
    conditioning: tuple[str, ...]
    seed: int
    params: dict[str, np.ndarray] = field(repr=False)
    n_classes: int = 0
    data_dim: int = 2

    @property
    def scalars(self) -> tuple[str, ...]:
        return tuple(s for s in ("t", "r") if s in self.conditioning)

    @property
    def class_conditional(self) -> bool:
        return "c" in self.conditioning

    @property
    def null_class(self) -> int:
        return self.n_classes

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def structure(self) -> tuple:
        return (self.config, self.conditioning, self.n_classes, self.data_dim)

    def copy(self) -> "VelocityNet":
        return VelocityNet(self.config, self.conditioning, self.seed,
                           {k: v.copy() for k, v in self.params.items()},
                           self.n_classes, self.data_dim)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def param_shapes(config: SizeConfig, conditioning: Sequence[str], n_classes: int = 0,
                 data_dim: int = 2) -> dict[str, tuple[int, ...]]:
    h = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "in.w": (data_dim, h), "in.b": (h,),
        "emb.w1": (h, h), "emb.b1": (h,), "emb.w2": (h, h), "emb.b2": (h,),
    }
    if "c" in conditioning:
        shapes["cls.table"] = (n_classes + 1, h)
    for i in range(config.layers):
        shapes.update({f"blocks.{i}.w1": (h, h), f"blocks.{i}.b1": (h,),
                       f"blocks.{i}.w2": (h, h), f"blocks.{i}.b2": (h,)})
    shapes.update({"out.ln.g": (h,), "out.ln.b": (h,), "out.w1": (h, h), "out.b1": (h,),
                   "out.w2": (h, data_dim), "out.b2": (data_dim,)})
    return shapes


def build(config: SizeConfig, conditioning: Sequence[str] = ("t",), seed: int = 0,
          n_classes: int = 0, data_dim: int = 2) -> VelocityNet:
    """Fresh net with deterministic weights for ``seed``."""
    cond = tuple(s for s in ("t", "r", "c") if s in set(conditioning))
    if "t" not in cond:
        raise ValueError("conditioning must include 't'")
    if "c" in cond and n_classes < 1:
        raise ValueError("class conditioning needs n_classes >= 1")
    if "c" not in cond:
        n_classes = 0
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, cond, n_classes, data_dim).items():
        if name == "out.ln.g":
            params[name] = np.ones(shape)
        elif name == "out.ln.b":
            params[name] = np.zeros(shape)
        elif name == "cls.table":
            params[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            w = _uniform(rng, data_dim if name.startswith("in.") else config.hidden_dim, shape)
            if name.startswith("blocks.") and name.endswith("w2"):
                w /= math.sqrt(config.layers)
            params[name] = w
    return VelocityNet(config, cond, int(seed), params, n_classes, data_dim)


def param_leaves(net: VelocityNet, rec: Record, prefix: str) -> dict[str, Node]:
    return {k: rec.leaf(prefix + k, v.shape) for k, v in net.params.items()}


@dataclass
class NetGraph:
    out: Node
    tokens: list[Node]


def velocity_graph(net: VelocityNet, rec: Record, x: Node, t: Node, r: Node | None = None,
                   c_onehot: Node | None = None, prefix: str = "net.",
                   params: dict[str, Node] | None = None) -> NetGraph:
    """Emit the net's forward pass. ``tokens`` holds each block's output."""
    p = param_leaves(net, rec, prefix) if params is None else params
    h = net.config.hidden_dim
    scalars = [t] if "r" not in net.conditioning else [t, r]
    if "r" in net.conditioning and r is None:
        raise ValueError("net is conditioned on r")
    if h % (2 * len(scalars)):
        raise ValueError("hidden_dim must be divisible by twice the number of time scalars")
    per = h // (2 * len(scalars))
    embs = [ad.time_embed(s, embed_freqs(per)) for s in scalars]
    e = embs[0] if len(embs) == 1 else _concat_last(embs)
    e = ad.linear(ad.silu(ad.linear(e, p["emb.w1"], p["emb.b1"])), p["emb.w2"], p["emb.b2"])
    if net.class_conditional:
        if c_onehot is None:
            raise ValueError("net is class conditional; pass class labels")
        e = e + c_onehot @ p["cls.table"]
    hid = ad.linear(x, p["in.w"], p["in.b"]) + e
    tokens = []
    for i in range(net.config.layers):
        b = f"blocks.{i}."
        hid = hid + ad.linear(ad.silu(ad.linear(hid, p[b + "w1"], p[b + "b1"])), p[b + "w2"], p[b + "b2"])
        tokens.append(hid)
    z = ad.layernorm(hid) * p["out.ln.g"] + p["out.ln.b"]
    out = ad.linear(ad.silu(ad.linear(z, p["out.w1"], p["out.b1"])), p["out.w2"], p["out.b2"])
    return NetGraph(out, tokens)


def _concat_last(nodes: list[Node]) -> Node:
    # concat along the last axis via stack + reshape
    st = ad.stack(nodes, axis=-2)
    return st.reshape(st.shape[:-2] + (st.shape[-2] * st.shape[-1],))


def one_hot(c, n_classes: int) -> np.ndarray:
    c = np.asarray(c, dtype=int)
    if np.any(c < 0) or np.any(c > n_classes):
        raise ValueError("class label out of range")
    return np.eye(n_classes + 1)[c]


@dataclass(frozen=True)
class GraphModel:
    """A parameter-free model written directly as a graph function.

    ``fn(rec, x, t, r, c)`` receives input nodes (``r``/``c`` may be None)
    and returns a (batch, dim) node. Used for closed-form velocity fields and
    hand-coded oracles.
    """

    fn: Callable
    conditioning: tuple[str, ...] = ("t",)
    n_classes: int = 0

    params = {}  # type: ignore[assignment]

    @property
    def class_conditional(self) -> bool:
        return "c" in self.conditioning

    @property
    def null_class(self) -> int:
        return self.n_classes


Model = Union[VelocityNet, GraphModel]


def model_key(model: Model):
    return ("net",) + model.structure() if isinstance(model, VelocityNet) else model


def _shell(key) -> Model:
    if isinstance(key, GraphModel):
        return key
    _, config, cond, n_classes, data_dim = key
    shapes = param_shapes(config, cond, n_classes, data_dim)
    return VelocityNet(config, cond, 0, {k: np.zeros(s) for k, s in shapes.items()}, n_classes, data_dim)


def input_nodes(rec: Record, key, batch: int, data_dim: int = 2, prefix: str = ""):
    """Declare the x, t[, r][, c] leaves a model with ``key`` consumes."""
    m = _shell(key)
    x = rec.leaf(prefix + "x", (batch, getattr(m, "data_dim", data_dim)))
    t = rec.leaf(prefix + "t", (batch,))
    r = rec.leaf(prefix + "r", (batch,)) if "r" in m.conditioning else None
    c = rec.leaf(prefix + "c", (batch, m.n_classes + 1)) if m.class_conditional else None
    return x, t, r, c


def model_graph(key, rec: Record, x: Node, t: Node, r: Node | None = None, c: Node | None = None,
                prefix: str = "net.") -> NetGraph:
    m = _shell(key)
    if isinstance(m, GraphModel):
        return NetGraph(rec.lift(m.fn(rec, x, t, r, c)), [])
    return velocity_graph(m, rec, x, t, r, c, prefix=prefix)


def bind(model: Model, prefix: str = "net.") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in model.params.items()}


def _as_time(v, batch: int, what: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(v, dtype=np.float64), (batch,)).copy()
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{what} must lie in [0, 1]")
    return arr


def net_inputs(model: Model, x, t, r=None, c=None, prefix: str = "") -> dict[str, np.ndarray]:
    """Leaf values for the x, t[, r][, c] inputs; ``c=None`` means the null class."""
    x = ad.as_tensor(x)
    batch = x.shape[0]
    leaves = {prefix + "x": x, prefix + "t": _as_time(t, batch, "t")}
    if "r" in model.conditioning:
        if r is None:
            raise ValueError("model is conditioned on r")
        leaves[prefix + "r"] = _as_time(r, batch, "r")
    if model.class_conditional:
        c = np.full(batch, model.null_class) if c is None else np.broadcast_to(c, (batch,))
        leaves[prefix + "c"] = one_hot(c, model.n_classes)
    return leaves


@lru_cache(maxsize=256)
def _net_record(key, batch: int, tokens: bool) -> Record:
    rec = Record()
    x, t, r, c = input_nodes(rec, key, batch)
    g = model_graph(key, rec, x, t, r, c, prefix="net.")
    rec.output("out", g.out)
    if tokens:
        rec.output("tokens", ad.stack(g.tokens, axis=1))
    return rec


def net_record(model: Model, batch: int, tokens: bool = False) -> Record:
    """Cached record with leaves x, t[, r][, c] and ``net.*`` parameters."""
    return _net_record(model_key(model), int(batch), tokens)


def eval_net(model: Model, x, t, r=None, c=None) -> np.ndarray:
    x = ad.as_tensor(x)
    leaves = net_inputs(model, x, t, r, c)
    leaves.update(bind(model, "net."))
    return ad.forward(net_record(model, x.shape[0]), leaves)["out"]


def block_tokens(net: VelocityNet, x, t, c=None) -> np.ndarray:
    """Hidden activation after every residual block, shape (batch, layers, hidden)."""
    x = ad.as_tensor(x)
    leaves = net_inputs(net, x, t, None, c)
    leaves.update(bind(net, "net."))
    return ad.forward(net_record(net, x.shape[0], tokens=True), leaves)["tokens"]


# ---------------------------------------------------------------------------
# spectral normalisation


class PowerIteration:
    """Persistent left-singular-vector estimate for one matrix."""

    def __init__(self, rows: int, seed: int = 0):
        u = np.random.default_rng(seed).normal(size=rows)
        self.u = u / np.linalg.norm(u)

    def step(self, w: np.ndarray, iterations: int = 1) -> tuple[np.ndarray, np.ndarray, float]:
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        u = self.u
        v = np.zeros(w.shape[1])
        for _ in range(iterations):
            v = w.T @ u
            nv = np.linalg.norm(v)
            if nv == 0.0:
                return u, v, 0.0
            v = v / nv
            u = w @ v
            nu = np.linalg.norm(u)
            if nu == 0.0:
                return self.u, v, 0.0
            u = u / nu
        self.u = u
        return u, v, float(u @ w @ v)


def spectral_normalize(matrix, iterations: int = 1, state: PowerIteration | None = None) -> np.ndarray:
    """Scale ``matrix`` by its estimated largest singular value.

    A zero matrix is returned unchanged.
    """
    w = ad.as_tensor(matrix)
    state = state or PowerIteration(w.shape[0])
    _, _, sigma = state.step(w, iterations)
    if sigma <= 0.0:
        return w.copy()
    return w / sigma


# ---------------------------------------------------------------------------
# discriminator heads

SN_MATRICES = ("k.w", "v.w", "out.w")


@dataclass
class DiscriminatorHead:
    variant: str  # "gap" | "awd"
    params: dict[str, np.ndarray] = field(repr=False)
    sn: dict[str, PowerIteration] = field(repr=False)
    sn_iterations: int = 1

    @property
    def token_dim(self) -> int:
        return self.params["ln.g"].shape[0]

    def sn_leaves(self, prefix: str, refresh: bool = True) -> dict[str, np.ndarray]:
        """Power-iteration vectors bound as constant leaves of the graph."""
        out = {}
        for name in SN_MATRICES:
            w = self.params[name]
            pi = self.sn[name]
            if refresh:
                u, v, sigma = pi.step(w, self.sn_iterations)
            else:
                u = pi.u
                v = w.T @ u
                nv = np.linalg.norm(v)
                v = v / nv if nv > 0 else v
                sigma = float(u @ w @ v)
            zero = sigma <= 1e-12
            out[f"{prefix}sn.{name}.u"] = np.zeros((1, w.shape[0])) if zero else u[None, :]
            out[f"{prefix}sn.{name}.v"] = np.zeros((1, w.shape[1])) if zero else v[None, :]
            out[f"{prefix}sn.{name}.floor"] = np.array(1.0 if zero else 0.0)
        return out


def build_discriminator(variant: str, token_dim: int, seed: int = 0, key_dim: int = 32,
                        value_dim: int = 64, sn_iterations: int = 1) -> DiscriminatorHead:
    variant = variant.lower()
    if variant not in ("gap", "awd"):
        raise ValueError("variant must be 'gap' or 'awd'")
    rng = np.random.default_rng(seed)
    p = {
        "ln.g": np.ones(token_dim), "ln.b": np.zeros(token_dim),
        "q": rng.normal(0.0, 1.0, size=key_dim),
        "k.w": _uniform(rng, token_dim, (token_dim, key_dim)), "k.b": np.zeros(key_dim),
        "v.w": _uniform(rng, token_dim, (token_dim, value_dim)), "v.b": np.zeros(value_dim),
        "out.w": _uniform(rng, value_dim, (value_dim, 1)), "out.b": np.zeros(1),
    }
    sn = {name: PowerIteration(p[name].shape[0], seed=seed + i + 1) for i, name in enumerate(SN_MATRICES)}
    head = DiscriminatorHead(variant, p, sn, sn_iterations)
    # warm the singular-vector estimates so the first step is already normalised
    for name in SN_MATRICES:
        sn[name].step(p[name], 20)
    return head


def _sn_weight(rec: Record, p: dict[str, Node], prefix: str, name: str) -> Node:
    # memoised in ``p`` so several heads sharing parameters share one normalisation
    if "sn:" + name in p:
        return p["sn:" + name]
    w = p[name]
    u = rec.leaf(f"{prefix}sn.{name}.u", (1, w.shape[0]))
    v = rec.leaf(f"{prefix}sn.{name}.v", (1, w.shape[1]))
    floor = rec.leaf(f"{prefix}sn.{name}.floor", ())
    sigma = ((u @ w) * v).sum() + floor
    p["sn:" + name] = w / sigma
    return p["sn:" + name]


@dataclass
class DiscGraph:
    score: Node
    weights: Node


def disc_graph(head: DiscriminatorHead, rec: Record, tokens: Node, prefix: str = "disc.",
               params: dict[str, Node] | None = None, variant: str | None = None) -> DiscGraph:
    """Score a (batch, n_tokens, dim) token tensor. ``weights`` is (batch, n_tokens)."""
    p = params if params is not None else {k: rec.leaf(prefix + k, v.shape) for k, v in head.params.items()}
    variant = variant or head.variant
    z = ad.layernorm(tokens) * p["ln.g"] + p["ln.b"]
    vals = z @ _sn_weight(rec, p, prefix, "v.w") + p["v.b"]
    n = tokens.shape[1]
    if variant == "awd":
        keys = z @ _sn_weight(rec, p, prefix, "k.w") + p["k.b"]
        dk = keys.shape[-1]
        logits = (keys @ p["q"].reshape(dk, 1)).reshape(tokens.shape[:2]) * (1.0 / math.sqrt(dk))
        weights = ad.softmax(logits, axis=-1)
        pooled = (vals * weights.reshape(tokens.shape[:2] + (1,))).sum(axis=1)
    else:
        weights = rec.const(np.full(tokens.shape[:2], 1.0 / n))
        pooled = vals.mean(axis=1)
    score = (ad.silu(pooled) @ _sn_weight(rec, p, prefix, "out.w") + p["out.b"]).reshape(tokens.shape[0])
    return DiscGraph(score, weights)


def bind_disc(head: DiscriminatorHead, prefix: str = "disc.", refresh_sn: bool = False) -> dict[str, np.ndarray]:
    leaves = {prefix + k: v for k, v in head.params.items()}
    leaves.update(head.sn_leaves(prefix, refresh=refresh_sn))
    return leaves


@lru_cache(maxsize=64)
def _disc_record(variant: str, shape: tuple, pshapes: tuple) -> Record:
    rec = Record()
    toks = rec.leaf("tokens", shape)
    shell = DiscriminatorHead(variant, {k: np.zeros(s) for k, s in pshapes}, {})
    g = disc_graph(shell, rec, toks)
    rec.output("score", g.score)
    rec.output("weights", g.weights)
    return rec


def _disc_eval(head: DiscriminatorHead, tokens, variant: str):
    toks = _as_tokens(tokens)
    pshapes = tuple(sorted((k, v.shape) for k, v in head.params.items()))
    rec = _disc_record(variant, toks.shape, pshapes)
    leaves = bind_disc(head)
    leaves["tokens"] = toks
    return ad.forward(rec, leaves)


def _as_tokens(tokens) -> np.ndarray:
    if isinstance(tokens, (list, tuple)):
        if len(tokens) == 0:
            raise ValueError("empty token sequence")
        tokens = np.stack([np.atleast_2d(ad.as_tensor(t)) for t in tokens], axis=1)
    toks = ad.as_tensor(tokens)
    if toks.ndim == 2:
        toks = toks[None]
    if toks.ndim != 3 or toks.shape[1] == 0:
        raise ValueError("empty token sequence")
    return toks


def awd_score(head: DiscriminatorHead, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Attention-pooled realness score and the per-token weights.

    ``tokens`` is a list of (batch, dim) arrays or a (batch, n, dim) array;
    a single (n, dim) sequence is treated as a batch of one.
    """
    ev = _disc_eval(head, tokens, "awd")
    return ev["score"], ev["weights"]


def gap_score(head: DiscriminatorHead, tokens) -> np.ndarray:
    return _disc_eval(head, tokens, "gap")["score"]


# ---------------------------------------------------------------------------
# checkpoints


def net_to_dict(net: VelocityNet) -> dict:
    return {
        "config": {
            "label": net.config.label, "hidden_dim": net.config.hidden_dim,
            "layers": net.config.layers, "learning_rate": net.config.learning_rate,
            "conditioning": list(net.conditioning), "n_classes": net.n_classes,
            "data_dim": net.data_dim,
        },
        "seed": net.seed,
        "params": {k: v.ravel().tolist() for k, v in net.params.items()},
    }


def net_from_dict(doc: dict) -> VelocityNet:
    cfg = doc["config"]
    config = SizeConfig(cfg["label"], int(cfg["hidden_dim"]), int(cfg["layers"]), float(cfg["learning_rate"]))
    cond = tuple(cfg.get("conditioning", ["t"]))
    n_classes = int(cfg.get("n_classes", 0))
    data_dim = int(cfg.get("data_dim", 2))
    shapes = param_shapes(config, cond, n_classes, data_dim)
    missing = set(shapes) ^ set(doc["params"])
    if missing:
        raise ValueError(f"checkpoint parameters do not match architecture: {sorted(missing)}")
    params = {k: np.asarray(doc["params"][k], dtype=np.float64).reshape(s) for k, s in shapes.items()}
    return VelocityNet(config, cond, int(doc["seed"]), params, n_classes, data_dim)


def save_net(net: VelocityNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(net_to_dict(net)))
    return path


def load_net(path) -> VelocityNet:
    return net_from_dict(json.loads(Path(path).read_text()))

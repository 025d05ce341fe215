"""Tape-based differentiation over float64 numpy arrays.

A :class:`Record` is an ordered list of primitive operations built by tracing
symbolic :class:`Node` handles. It is replayed with :func:`forward`,
differentiated in reverse with :func:`backward` and in forward mode with
:func:`jvp`. Forward mode carries (primal, tangent) pairs through its own
rule table, so the two modes can be checked against each other.

Example::

    rec = Record()
    x = rec.leaf("x", (2,))
    rec.output("y", (x * x).sum())
    ev = forward(rec, {"x": np.array([1.0, 2.0])})
    backward(ev)["x"]   # array([2., 4.])
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

# Finite-value checks on every tensor conversion (checked builds): HD_LAB_CHECKED=1.
CHECKED = os.environ.get("HD_LAB_CHECKED", "0") == "1"


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class UnboundLeafError(AutodiffError):
    pass


def as_tensor(value, checked: bool | None = None) -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf when checking is on."""
    arr = np.asarray(value, dtype=np.float64)
    if (CHECKED if checked is None else checked) and not np.all(np.isfinite(arr)):
        raise AutodiffError("tensor contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# primitive rules


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _sigmoid_raw(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# silu evaluates sigmoid(x) and its derivative rules need it again for the
# same array. Evaluation always recomputes and stores; the rules reuse the
# stored value when handed the identical array object.
_SIG_CACHE: "OrderedDict[int, tuple[np.ndarray, np.ndarray]]" = OrderedDict()
_SIG_CACHE_SIZE = 512


def _sigmoid_store(x):
    s = _sigmoid_raw(x)
    _SIG_CACHE[id(x)] = (x, s)
    if len(_SIG_CACHE) > _SIG_CACHE_SIZE:
        _SIG_CACHE.popitem(last=False)
    return s


def _sigmoid(x):
    hit = _SIG_CACHE.get(id(x))
    if hit is not None and hit[0] is x:
        return hit[1]
    return _sigmoid_raw(x)


@dataclass(frozen=True)
class Primitive:
    name: str
    shape: Callable
    eval: Callable
    vjp: Callable  # (g, out, ins, needs, attrs) -> list of cotangents or None
    jvp: Callable  # (out, ins, tans, attrs) -> tangent or None


def _broadcast_shape(*shapes, **_):
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


def _same_shape(s, **_):
    return tuple(s)


def _matmul_shape(a, b, **_):
    if len(b) != 2 or len(a) < 1 or a[-1] != b[0]:
        raise ShapeError(f"matmul shape mismatch {a} @ {b}")
    return tuple(a[:-1]) + (b[1],)


def _matmul_vjp(g, out, ins, needs, attrs):
    a, b = ins
    ga = g @ b.T if needs[0] else None
    gb = None
    if needs[1]:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return [ga, gb]


def _matmul_jvp(out, ins, tans, attrs):
    a, b = ins
    da, db = tans
    t = None
    if da is not None:
        t = da @ b
    if db is not None:
        t = _tadd(t, a @ db)
    return t


def _reduce_shape(s, axis=None, keepdims=False):
    if axis is None:
        return tuple(1 for _ in s) if keepdims else ()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(s) for a in axes)
    if keepdims:
        return tuple(1 if i in axes else n for i, n in enumerate(s))
    return tuple(n for i, n in enumerate(s) if i not in axes)


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in sorted(x % len(in_shape) for x in axes):
            g = np.expand_dims(g, a)
    elif axis is None and not keepdims:
        g = np.reshape(g, (1,) * len(in_shape))
    return np.broadcast_to(g, in_shape)


def _reduce_count(in_shape, axis):
    if axis is None:
        return int(np.prod(in_shape)) if in_shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([in_shape[a] for a in axes]))


def _amax_mask(x, axis):
    # one-hot on the first maximiser along the reduced axes
    m = np.max(x, axis=axis, keepdims=True)
    hit = x == m
    if axis is None:
        first = np.zeros(x.size, dtype=bool)
        first[np.argmax(hit.ravel())] = True
        return first.reshape(x.shape)
    ax = axis % x.ndim if isinstance(axis, int) else None
    if ax is None:
        raise AutodiffError("amax supports a single axis or axis=None")
    idx = np.argmax(hit, axis=ax)
    return np.expand_dims(idx, ax) == np.arange(x.shape[ax]).reshape(
        [-1 if i == ax else 1 for i in range(x.ndim)]
    )


def _ln_parts(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _ln_vjp(g, out, ins, needs, attrs):
    xhat, inv = _ln_parts(ins[0], attrs["eps"])
    gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return [gx]


def _ln_jvp(out, ins, tans, attrs):
    (dx,) = tans
    if dx is None:
        return None
    x = ins[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + attrs["eps"])
    dxc = dx - dx.mean(axis=-1, keepdims=True)
    dvar = 2.0 * (xc * dxc).mean(axis=-1, keepdims=True)
    ds = dvar / (2.0 * s)
    return dxc / s - xc * ds / (s * s)


def _embed_shape(t, freqs):
    return tuple(t) + (2 * len(freqs),)


def _embed_eval(t, freqs):
    arg = t[..., None] * np.asarray(freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _embed_vjp(g, out, ins, needs, attrs):
    f = np.asarray(attrs["freqs"])
    k = len(f)
    arg = ins[0][..., None] * f
    gt = (g[..., :k] * np.cos(arg) * f).sum(-1) - (g[..., k:] * np.sin(arg) * f).sum(-1)
    return [gt]


def _embed_jvp(out, ins, tans, attrs):
    (dt,) = tans
    if dt is None:
        return None
    f = np.asarray(attrs["freqs"])
    arg = ins[0][..., None] * f
    rate = dt[..., None] * f
    return np.concatenate([np.cos(arg) * rate, -np.sin(arg) * rate], axis=-1)


def _stack_shape(*shapes, axis=0):
    if len(set(shapes)) != 1:
        raise ShapeError(f"stack needs equal shapes, got {shapes}")
    s = list(shapes[0])
    s.insert(axis % (len(s) + 1), len(shapes))
    return tuple(s)


def _stack_jvp(out, ins, tans, attrs):
    if all(d is None for d in tans):
        return None
    parts = [np.zeros_like(x) if d is None else d for x, d in zip(ins, tans)]
    return np.stack(parts, axis=attrs["axis"])


def _reshape_shape(s, shape):
    if int(np.prod(s)) != int(np.prod(shape)):
        raise ShapeError(f"cannot reshape {s} to {shape}")
    return tuple(shape)


def _lift(fn):
    # elementwise jvp: tangent * f'(x)
    def rule(out, ins, tans, attrs):
        return None if tans[0] is None else tans[0] * fn(ins[0], out)

    return rule


def _silu_grad(x, out):
    # s (1 + x (1 - s)) = s + out (1 - s)
    s = _sigmoid(x)
    d = np.subtract(1.0, s)
    d *= out
    d += s
    return d


def _silu(x):
    out = _sigmoid_store(x) * x
    return out


def _linear_shape(a, w, b, **_):
    if len(w) != 2 or len(a) < 1 or a[-1] != w[0] or tuple(b) != (w[1],):
        raise ShapeError(f"linear shape mismatch {a} @ {w} + {b}")
    return tuple(a[:-1]) + (w[1],)


def _linear(a, w, b):
    out = a @ w
    out += b
    return out


def _linear_vjp(g, out, ins, needs, attrs):
    a, w, _ = ins
    ga = g @ w.T if needs[0] else None
    g2 = g.reshape(-1, g.shape[-1])
    gw = a.reshape(-1, a.shape[-1]).T @ g2 if needs[1] else None
    gb = g2.sum(axis=0) if needs[2] else None
    return [ga, gw, gb]


def _linear_jvp(out, ins, tans, attrs):
    a, w, _ = ins
    da, dw, db = tans
    t = None if da is None else da @ w
    if dw is not None:
        t = _tadd(t, a @ dw)
    if db is not None:
        t = db if t is None else t + db
    return t


PRIMITIVES: dict[str, Primitive] = {}


def _register(p: Primitive) -> None:
    PRIMITIVES[p.name] = p


_register(Primitive(
    "add", _broadcast_shape, lambda a, b: a + b,
    lambda g, o, ins, n, at: [_unbroadcast(g, ins[0].shape) if n[0] else None,
                              _unbroadcast(g, ins[1].shape) if n[1] else None],
    lambda o, ins, t, at: _tadd(t[0], t[1]),
))
_register(Primitive(
    "sub", _broadcast_shape, lambda a, b: a - b,
    lambda g, o, ins, n, at: [_unbroadcast(g, ins[0].shape) if n[0] else None,
                              _unbroadcast(-g, ins[1].shape) if n[1] else None],
    lambda o, ins, t, at: _tadd(t[0], None if t[1] is None else -t[1]),
))
_register(Primitive(
    "mul", _broadcast_shape, lambda a, b: a * b,
    lambda g, o, ins, n, at: [_unbroadcast(g * ins[1], ins[0].shape) if n[0] else None,
                              _unbroadcast(g * ins[0], ins[1].shape) if n[1] else None],
    lambda o, ins, t, at: _tadd(None if t[0] is None else t[0] * ins[1],
                                None if t[1] is None else ins[0] * t[1]),
))
_register(Primitive(
    "div", _broadcast_shape, lambda a, b: a / b,
    lambda g, o, ins, n, at: [_unbroadcast(g / ins[1], ins[0].shape) if n[0] else None,
                              _unbroadcast(-g * o / ins[1], ins[1].shape) if n[1] else None],
    lambda o, ins, t, at: _tadd(None if t[0] is None else t[0] / ins[1],
                                None if t[1] is None else -o * t[1] / ins[1]),
))
_register(Primitive(
    "neg", _same_shape, lambda a: -a,
    lambda g, o, ins, n, at: [-g],
    lambda o, ins, t, at: None if t[0] is None else -t[0],
))
_register(Primitive("matmul", _matmul_shape, lambda a, b: a @ b, _matmul_vjp, _matmul_jvp))
_register(Primitive("linear", _linear_shape, _linear, _linear_vjp, _linear_jvp))
_register(Primitive(
    "silu", _same_shape, _silu,
    lambda g, o, ins, n, at: [g * _silu_grad(ins[0], o)],
    _lift(_silu_grad),
))
_register(Primitive(
    "relu", _same_shape, lambda x: np.maximum(x, 0.0),
    lambda g, o, ins, n, at: [g * (ins[0] > 0)],
    _lift(lambda x, o: (x > 0).astype(np.float64)),
))
_register(Primitive(
    "exp", _same_shape, np.exp,
    lambda g, o, ins, n, at: [g * o],
    _lift(lambda x, o: o),
))
_register(Primitive(
    "layernorm", _same_shape, lambda x, eps: _ln_parts(x, eps)[0], _ln_vjp, _ln_jvp,
))
_register(Primitive(
    "time_embed", _embed_shape, _embed_eval, _embed_vjp, _embed_jvp,
))
_register(Primitive(
    "sum", _reduce_shape, lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
    lambda g, o, ins, n, at: [_expand_reduced(g, ins[0].shape, at["axis"], at["keepdims"])],
    lambda o, ins, t, at: None if t[0] is None else np.sum(t[0], axis=at["axis"], keepdims=at["keepdims"]),
))
_register(Primitive(
    "mean", _reduce_shape, lambda x, axis, keepdims: np.mean(x, axis=axis, keepdims=keepdims),
    lambda g, o, ins, n, at: [_expand_reduced(g, ins[0].shape, at["axis"], at["keepdims"])
                              / _reduce_count(ins[0].shape, at["axis"])],
    lambda o, ins, t, at: None if t[0] is None else np.mean(t[0], axis=at["axis"], keepdims=at["keepdims"]),
))
_register(Primitive(
    "amax", _reduce_shape, lambda x, axis, keepdims: np.max(x, axis=axis, keepdims=keepdims),
    lambda g, o, ins, n, at: [_expand_reduced(g, ins[0].shape, at["axis"], at["keepdims"])
                              * _amax_mask(ins[0], at["axis"])],
    lambda o, ins, t, at: None if t[0] is None else np.sum(
        t[0] * _amax_mask(ins[0], at["axis"]), axis=at["axis"], keepdims=at["keepdims"]),
))
_register(Primitive(
    "stop_gradient", _same_shape, lambda x: x,
    lambda g, o, ins, n, at: [None],
    lambda o, ins, t, at: None,
))
_register(Primitive(
    "reshape", _reshape_shape, lambda x, shape: np.reshape(x, shape),
    lambda g, o, ins, n, at: [np.reshape(g, ins[0].shape)],
    lambda o, ins, t, at: None if t[0] is None else np.reshape(t[0], at["shape"]),
))
_register(Primitive(
    "stack", _stack_shape, lambda *xs, axis: np.stack(xs, axis=axis),
    lambda g, o, ins, n, at: [np.take(g, i, axis=at["axis"]) if n[i] else None for i in range(len(ins))],
    _stack_jvp,
))


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class OpNode:
    prim: str  # primitive name, or "leaf" / "const"
    inputs: tuple[int, ...]
    attrs: Mapping
    shape: tuple[int, ...]


class Node:
    """Symbolic handle to one value inside a :class:`Record`."""

    __slots__ = ("record", "index")
    __array_priority__ = 100  # keep numpy from hijacking reflected operators

    def __init__(self, record: "Record", index: int):
        self.record = record
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.record.ops[self.index].shape

    def _bin(self, prim, other, swap=False):
        other = self.record.lift(other)
        a, b = (other, self) if swap else (self, other)
        return self.record.apply(prim, a, b)

    def __add__(self, o): return self._bin("add", o)
    def __radd__(self, o): return self._bin("add", o, swap=True)
    def __sub__(self, o): return self._bin("sub", o)
    def __rsub__(self, o): return self._bin("sub", o, swap=True)
    def __mul__(self, o): return self._bin("mul", o)
    def __rmul__(self, o): return self._bin("mul", o, swap=True)
    def __truediv__(self, o): return self._bin("div", o)
    def __rtruediv__(self, o): return self._bin("div", o, swap=True)
    def __matmul__(self, o): return self._bin("matmul", o)
    def __neg__(self): return self.record.apply("neg", self)

    def sum(self, axis=None, keepdims=False) -> "Node":
        return self.record.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Node":
        return self.record.apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if -1 in shape:
            known = int(np.prod([s for s in shape if s != -1]))
            shape = tuple(int(np.prod(self.shape)) // known if s == -1 else s for s in shape)
        return self.record.apply("reshape", self, shape=tuple(shape))

    def __repr__(self):
        op = self.record.ops[self.index]
        return f"Node({self.index}, {op.prim}, shape={op.shape})"


class Record:
    """Ordered computation record. Build once, then treat as read-only."""

    def __init__(self):
        self.ops: list[OpNode] = []
        self.leaves: dict[str, int] = {}
        self.outputs: dict[str, int] = {}

    def _push(self, op: OpNode) -> Node:
        self.ops.append(op)
        return Node(self, len(self.ops) - 1)

    def leaf(self, name: str, shape: Sequence[int]) -> Node:
        if name in self.leaves:
            raise AutodiffError(f"duplicate leaf {name!r}")
        node = self._push(OpNode("leaf", (), {"name": name}, tuple(int(s) for s in shape)))
        self.leaves[name] = node.index
        return node

    def const(self, value) -> Node:
        arr = as_tensor(value)
        return self._push(OpNode("const", (), {"value": arr}, arr.shape))

    def lift(self, value) -> Node:
        if isinstance(value, Node):
            if value.record is not self:
                raise AutodiffError("node belongs to a different record")
            return value
        return self.const(value)

    def apply(self, prim: str, *inputs, **attrs) -> Node:
        p = PRIMITIVES[prim]
        nodes = [self.lift(x) for x in inputs]
        shape = p.shape(*[n.shape for n in nodes], **attrs)
        return self._push(OpNode(prim, tuple(n.index for n in nodes), attrs, tuple(shape)))

    def output(self, name: str, node: Node) -> None:
        self.outputs[name] = self.lift(node).index

    def __len__(self):
        return len(self.ops)


# free-function spellings of the primitives
def matmul(a: Node, b) -> Node: return a.record.apply("matmul", a, b)
def linear(x: Node, w, b) -> Node: return x.record.apply("linear", x, w, b)
def silu(x: Node) -> Node: return x.record.apply("silu", x)
def relu(x: Node) -> Node: return x.record.apply("relu", x)
def exp(x: Node) -> Node: return x.record.apply("exp", x)
def stop_gradient(x: Node) -> Node: return x.record.apply("stop_gradient", x)
def amax(x: Node, axis=None, keepdims=False) -> Node: return x.record.apply("amax", x, axis=axis, keepdims=keepdims)


def layernorm(x: Node, eps: float = 1e-5) -> Node:
    return x.record.apply("layernorm", x, eps=eps)


def time_embed(t: Node, freqs: Sequence[float]) -> Node:
    return t.record.apply("time_embed", t, freqs=tuple(float(f) for f in freqs))


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    return nodes[0].record.apply("stack", *nodes, axis=axis)


def softmax(x: Node, axis: int = -1) -> Node:
    e = exp(x - stop_gradient(amax(x, axis=axis, keepdims=True)))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# evaluation


def _bind(record: Record, leaves: Mapping[str, np.ndarray], what: str = "leaf"):
    bound = {}
    for name, idx in record.leaves.items():
        if name not in leaves:
            raise UnboundLeafError(f"unbound {what} {name!r}")
        arr = as_tensor(leaves[name])
        if arr.shape != record.ops[idx].shape:
            raise ShapeError(f"{what} {name!r}: expected shape {record.ops[idx].shape}, got {arr.shape}")
        bound[idx] = arr
    return bound


@dataclass
class Evaluation:
    """Values of every node of one forward replay."""

    record: Record
    values: list = field(repr=False)

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return {k: self.values[i] for k, i in self.record.outputs.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.record.outputs[name]]

    def value(self, node: Node) -> np.ndarray:
        return self.values[node.index]


def forward(record: Record, leaves: Mapping[str, np.ndarray]) -> Evaluation:
    bound = _bind(record, leaves)
    values: list = [None] * len(record.ops)
    for i, op in enumerate(record.ops):
        if op.prim == "leaf":
            values[i] = bound[i]
        elif op.prim == "const":
            values[i] = op.attrs["value"]
        else:
            values[i] = PRIMITIVES[op.prim].eval(*[values[j] for j in op.inputs], **op.attrs)
    return Evaluation(record, values)


def update(ev: Evaluation, leaves: Mapping[str, np.ndarray]) -> Evaluation:
    """Rebind some leaves and recompute only the nodes that depend on them."""
    rec = ev.record
    values = list(ev.values)
    dirty = [False] * len(rec.ops)
    for name, value in leaves.items():
        if name not in rec.leaves:
            raise UnboundLeafError(f"unknown leaf {name!r}")
        idx = rec.leaves[name]
        arr = as_tensor(value)
        if arr.shape != rec.ops[idx].shape:
            raise ShapeError(f"leaf {name!r}: expected shape {rec.ops[idx].shape}, got {arr.shape}")
        values[idx] = arr
        dirty[idx] = True
    for i, op in enumerate(rec.ops):
        if op.inputs and any(dirty[j] for j in op.inputs):
            dirty[i] = True
            values[i] = PRIMITIVES[op.prim].eval(*[values[j] for j in op.inputs], **op.attrs)
    return Evaluation(rec, values)


def backward(
    ev: Evaluation,
    seeds: Mapping[str, np.ndarray] | np.ndarray | float | None = None,
    wrt: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of sum(seed * output) with respect to the requested leaves.

    ``seeds`` may be omitted for a record with a single scalar output.
    Leaves outside ``wrt`` are skipped (default: all leaves).
    """
    rec = ev.record
    if seeds is None or not isinstance(seeds, Mapping):
        if len(rec.outputs) != 1:
            raise AutodiffError("seed must name outputs when the record has several")
        (name,) = rec.outputs
        seeds = {name: np.ones(rec.ops[rec.outputs[name]].shape) if seeds is None else seeds}
    names = list(rec.leaves) if wrt is None else list(wrt)
    for n in names:
        if n not in rec.leaves:
            raise UnboundLeafError(f"unknown leaf {n!r}")

    ops = rec.ops
    needs = [False] * len(ops)
    for n in names:
        needs[rec.leaves[n]] = True
    for i, op in enumerate(ops):
        if op.inputs and op.prim != "stop_gradient":
            needs[i] = any(needs[j] for j in op.inputs)

    cot: list = [None] * len(ops)
    for name, seed in seeds.items():
        idx = rec.outputs[name]
        seed = as_tensor(seed)
        if seed.shape != ops[idx].shape:
            raise ShapeError(f"seed for {name!r} has shape {seed.shape}, output is {ops[idx].shape}")
        cot[idx] = _tadd(cot[idx], seed)

    vals = ev.values
    for i in range(len(ops) - 1, -1, -1):
        g = cot[i]
        op = ops[i]
        if g is None or not needs[i] or not op.inputs:
            continue
        in_needs = [needs[j] for j in op.inputs]
        grads = PRIMITIVES[op.prim].vjp(g, vals[i], [vals[j] for j in op.inputs], in_needs, op.attrs)
        for j, gj, nj in zip(op.inputs, grads, in_needs):
            if nj and gj is not None:
                cot[j] = gj if cot[j] is None else cot[j] + gj
    out = {}
    for n in names:
        idx = rec.leaves[n]
        out[n] = np.zeros(ops[idx].shape) if cot[idx] is None else np.array(cot[idx])
    return out


def jvp(
    record: Record,
    leaves: Mapping[str, np.ndarray],
    tangents: Mapping[str, np.ndarray],
    with_evaluation: bool = False,
):
    """Forward-mode directional derivative.

    Returns ``(outputs, output_tangents)``, plus the primal
    :class:`Evaluation` when ``with_evaluation`` is set (usable by
    :func:`backward`). Leaves without an entry in ``tangents`` have a zero
    tangent.
    """
    bound = _bind(record, leaves)
    for name in tangents:
        if name not in record.leaves:
            raise UnboundLeafError(f"tangent for unknown leaf {name!r}")
    primal: list = [None] * len(record.ops)
    tan: list = [None] * len(record.ops)
    for i, op in enumerate(record.ops):
        if op.prim == "leaf":
            primal[i] = bound[i]
            name = op.attrs["name"]
            if name in tangents:
                d = as_tensor(tangents[name])
                if d.shape != op.shape:
                    raise ShapeError(f"tangent {name!r}: expected shape {op.shape}, got {d.shape}")
                tan[i] = d
        elif op.prim == "const":
            primal[i] = op.attrs["value"]
        else:
            p = PRIMITIVES[op.prim]
            ins = [primal[j] for j in op.inputs]
            primal[i] = p.eval(*ins, **op.attrs)
            ts = [tan[j] for j in op.inputs]
            if any(t is not None for t in ts):
                d = p.jvp(primal[i], ins, ts, op.attrs)
                if d is not None and d.shape != op.shape:
                    d = np.broadcast_to(d, op.shape)
                tan[i] = d
    outs, touts = {}, {}
    for name, idx in record.outputs.items():
        outs[name] = primal[idx]
        t = tan[idx]
        touts[name] = np.zeros(record.ops[idx].shape) if t is None else np.array(t)
    if with_evaluation:
        return outs, touts, Evaluation(record, primal)
    return outs, touts

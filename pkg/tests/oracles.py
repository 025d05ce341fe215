"""Reference computations that do not touch the package's graph machinery."""

from __future__ import annotations

import numpy as np


def central_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def central_dir(f, x: np.ndarray, d: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Directional derivative of f at x along d by central differences."""
    return (np.asarray(f(x + eps * d)) - np.asarray(f(x - eps * d))) / (2 * eps)


def rel_err(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def silu(x):
    return x / (1.0 + np.exp(-x))


def mlp_forward(x, weights):
    """Plain numpy MLP: silu between layers, linear output."""
    h = x
    for i, (w, b) in enumerate(weights):
        h = h @ w + b
        if i < len(weights) - 1:
            h = silu(h)
    return h


def time_features(t, freqs):
    ang = np.outer(t, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def layernorm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def velocity_net_forward(params, x, t, r, freqs, layers):
    """Residual MLP forward pass written directly in numpy."""
    emb = time_features(t, freqs) if r is None else np.concatenate(
        [time_features(t, freqs), time_features(r, freqs)], axis=-1)
    e = silu(emb @ params["emb.w1"] + params["emb.b1"]) @ params["emb.w2"] + params["emb.b2"]
    h = x @ params["in.w"] + params["in.b"] + e
    tokens = []
    for i in range(layers):
        b = f"blocks.{i}."
        h = h + silu(h @ params[b + "w1"] + params[b + "b1"]) @ params[b + "w2"] + params[b + "b2"]
        tokens.append(h)
    z = layernorm(h) * params["out.ln.g"] + params["out.ln.b"]
    out = silu(z @ params["out.w1"] + params["out.b1"]) @ params["out.w2"] + params["out.b2"]
    return out, np.stack(tokens, axis=1)


def long_power_sigma(w: np.ndarray, iterations: int = 1000, seed: int = 99) -> float:
    """Top singular value by a long power iteration, no SVD."""
    v = np.random.default_rng(seed).normal(size=w.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        u = w @ v
        u /= np.linalg.norm(u)
        v = w.T @ u
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(w @ v))


def riemann_right(v, n: int) -> float:
    """Right-endpoint Riemann mean of v on [0, 1] with n cells."""
    t = np.arange(1, n + 1) / n
    return float(np.mean(v(t)))

"""Adam with bias correction over one flat parameter buffer."""

from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    """Updates ``params`` in place.

    On construction every array in ``params`` is replaced by a view into a
    single flat buffer so one step is a handful of vector operations.
    Gradients arrive keyed by graph leaf name (``prefix + key``).

    With ``ema_decay`` set, an exponential moving average of the weights is
    kept alongside; :meth:`load_average` copies it into the parameters.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 prefix: str = "", ema_decay: float | None = None):
        if ema_decay is not None and not 0.0 <= ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.params = params
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.prefix = prefix
        self.keys = list(params)
        self.flat = np.concatenate([np.ravel(params[k]) for k in self.keys]) if self.keys else np.zeros(0)
        offset = 0
        for k in self.keys:
            n = params[k].size
            params[k] = self.flat[offset:offset + n].reshape(params[k].shape)
            offset += n
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._g = np.zeros_like(self.flat)
        self._tmp = np.zeros_like(self.flat)
        self._slices = []
        offset = 0
        for k in self.keys:
            n = self.params[k].size
            self._slices.append((prefix + k, slice(offset, offset + n)))
            offset += n
        self.t = 0
        self.ema_decay = ema_decay
        self.ema = self.flat.copy() if ema_decay is not None else None

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        g, tmp = self._g, self._tmp
        for name, sl in self._slices:
            grad = grads.get(name)
            g[sl] = 0.0 if grad is None else np.ravel(grad)
        self.t += 1
        # m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2
        self.m *= self.b1
        np.multiply(g, 1.0 - self.b1, out=tmp)
        self.m += tmp
        self.v *= self.b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.b2
        self.v += tmp
        if self.lr:
            c1 = 1.0 - self.b1 ** self.t
            c2 = 1.0 - self.b2 ** self.t
            np.sqrt(self.v, out=tmp)
            tmp *= 1.0 / np.sqrt(c2)
            tmp += self.eps
            np.divide(self.m, tmp, out=tmp)
            tmp *= self.lr / c1
            self.flat -= tmp
        if self.ema is not None:
            self.ema *= self.ema_decay
            np.multiply(self.flat, 1.0 - self.ema_decay, out=tmp)
            self.ema += tmp

    def load_average(self) -> None:
        """Overwrite the parameters with their moving average (no-op without one)."""
        if self.ema is not None:
            self.flat[...] = self.ema

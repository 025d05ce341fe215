"""The 2D toy problem: a uniform rectangle prior and the upper unit semicircle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRIOR_LOW = np.array([-2.0, -2.0])
PRIOR_HIGH = np.array([2.0, 0.0])


def sample_prior(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform over x in [-2, 2], y in [-2, 0]."""
    return rng.uniform(PRIOR_LOW, PRIOR_HIGH, size=(n, 2))


def sample_target(rng: np.random.Generator, n: int, n_classes: int = 0):
    """Points on the upper unit semicircle.

    With ``n_classes=2`` the arc is split at pi/2 (class 0 on the right,
    class 1 on the left) and ``(points, labels)`` is returned.
    """
    if n_classes == 0:
        theta = rng.uniform(0.0, np.pi, size=n)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if n_classes != 2:
        raise ValueError("only the 2-class split is defined")
    labels = rng.integers(0, 2, size=n)
    theta = (labels + rng.uniform(0.0, 1.0, size=n)) * (np.pi / 2)
    return np.stack([np.cos(theta), np.sin(theta)], axis=1), labels


@dataclass(frozen=True)
class ToyDataset:
    n_classes: int = 0

    def prior(self, rng, n):
        return sample_prior(rng, n)

    def target(self, rng, n):
        """Always returns ``(points, labels)``; labels is None when unconditional."""
        if self.n_classes:
            return sample_target(rng, n, self.n_classes)
        return sample_target(rng, n), None


PROBE_SEED = 20_250_101
PROBE_SIZE = 4096


def probe_set(n: int = PROBE_SIZE, seed: int = PROBE_SEED) -> np.ndarray:
    """Fixed prior samples shared by every run for paired comparisons."""
    return sample_prior(np.random.default_rng(seed), n)

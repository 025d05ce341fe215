"""Closed-form checks of two identities behind trajectory distillation.

* A net trained to predict the average velocity from 0 to t, F(t), satisfies
  F(t) + t F'(t) = v(t).
* Halving-recursion distillation reproduces the arithmetic mean of 2^N
  teacher evaluations, which converges to the mean velocity on [0, 1] as
  a right-endpoint Riemann sum.

Fields are x-independent so no trajectory has to be integrated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

# long double where the platform has it: keeps central-difference roundoff
# well below the truncation error for the step sizes of interest
WIDE = np.longdouble


@dataclass(frozen=True)
class AnalyticField:
    """v(t) and its mean velocity U(r, t) = 1/(t - r) * integral of v over [r, t]."""

    name: str
    v: Callable[[np.ndarray], np.ndarray]
    integral: Callable[[np.ndarray, np.ndarray], np.ndarray]  # integral of v over [r, t]

    def velocity(self, t):
        return self.v(np.asarray(t, dtype=WIDE))

    def mean_velocity(self, r, t):
        r = np.asarray(r, dtype=WIDE)
        t = np.asarray(t, dtype=WIDE)
        r, t = np.broadcast_arrays(r, t)
        gap = t - r
        safe = np.where(gap == 0, 1, gap)
        return np.where(gap == 0, self.v(t), self.integral(r, t) / safe)


def constant_field(c: float = 1.0) -> AnalyticField:
    return AnalyticField(f"const({c})", lambda t: np.full_like(t, c, dtype=WIDE), lambda r, t: c * (t - r))


def linear_field() -> AnalyticField:
    """v = 2t."""
    return AnalyticField("2t", lambda t: 2 * t, lambda r, t: t * t - r * r)


def sine_field() -> AnalyticField:
    """v = sin t; the integral uses 2 sin((t+r)/2) sin((t-r)/2) to avoid cancellation."""
    return AnalyticField("sin(t)", np.sin, lambda r, t: 2 * np.sin((t + r) / 2) * np.sin((t - r) / 2))


def periodic_field() -> AnalyticField:
    """v = sin(2 pi t) + 2."""
    w = 2 * np.pi
    return AnalyticField(
        "sin(2pi t)+2",
        lambda t: np.sin(w * t) + 2,
        lambda r, t: 2 * (t - r) + 2 * np.sin(w * (t + r) / 2) * np.sin(w * (t - r) / 2) / w,
    )


FIELDS = {"const": constant_field, "2t": linear_field, "sin": sine_field, "periodic": periodic_field}


def check_field(field: AnalyticField, n: int = 64, seed: int = 0) -> tuple[float, float]:
    """(max |U(t - 1e-8, t) - v(t)|, max quadrature mismatch of (t - r) U)."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.01, 1.0, n)
    r = t * rng.uniform(0.0, 1.0, n)
    limit = np.max(np.abs(field.mean_velocity(t - 1e-8, t) - field.velocity(t)))
    nodes, weights = np.polynomial.legendre.leggauss(40)
    quad = []
    for ri, ti in zip(r, t):
        x = 0.5 * (ti - ri) * nodes + 0.5 * (ti + ri)
        quad.append(0.5 * (ti - ri) * np.sum(weights * field.velocity(x)))
    mism = np.max(np.abs(np.array(quad) - (t - r) * field.mean_velocity(r, t)))
    return float(limit), float(mism)


def default_grid(n: int = 1000) -> np.ndarray:
    return np.linspace(1e-3, 1.0, n)


def scm_residual(field: AnalyticField, grid=None, h: float = 1e-5) -> float:
    """max over the grid of |F(t) + t F'(t) - v(t)| with F(t) = U(0, t) and
    F' by central differences of step h."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    if grid.min() < 1e-3:
        raise ValueError("grid must start at t >= 1e-3")
    if not 0 < h <= grid.min():
        raise ValueError("step h must be positive and at most the smallest grid point")
    t = grid.astype(WIDE)
    h = WIDE(h)

    def F(s):
        return field.mean_velocity(np.zeros_like(s), s)

    dF = (F(t + h) - F(t - h)) / (2 * h)
    return float(np.max(np.abs(F(t) + t * dF - field.velocity(t))))


def residual_decay(field: AnalyticField, steps=(1e-3, 1e-4, 1e-5), grid=None) -> list[tuple[float, float]]:
    return [(h, scm_residual(field, grid, h)) for h in steps]


def _teacher_values(v, N: int, T: float = 1.0) -> np.ndarray:
    if N < 0:
        raise ValueError("N must be >= 0")
    t = np.arange(1, 2 ** N + 1, dtype=np.float64) * (T / 2 ** N)
    return np.asarray(v(t), dtype=np.float64)


def _mean(values: np.ndarray) -> float:
    # correctly rounded sum; the count is a power of two so the division is exact
    return math.fsum(values) / values.size


def _as_callable(teacher_v):
    return teacher_v.velocity if isinstance(teacher_v, AnalyticField) else teacher_v


def pgd_average(teacher_v, field: AnalyticField, N: int, T: float = 1.0) -> tuple[float, float]:
    """(mean of v at t_i = i T / 2^N for i = 1..2^N, |mean - U(0, T)|)."""
    if T != 1.0:
        raise ValueError("only T = 1 is supported")
    avg = _mean(_teacher_values(_as_callable(teacher_v), N, T))
    return avg, abs(avg - float(field.mean_velocity(0.0, T)))


def pgd_recursion(teacher_v, N: int, T: float = 1.0) -> float:
    """Run the halving recursion: each level averages the value at its right
    endpoint with the value half an interval earlier."""
    level = _teacher_values(_as_callable(teacher_v), N, T)  # level 0 at indices 1..2^N
    for _ in range(N):
        # level k keeps indices j * 2^k; its entries average pairs of level k-1
        level = 0.5 * (level[1::2] + level[0::2])
    return float(level[0])


def pgd_recursion_equivalence(teacher_v, N: int, T: float = 1.0, tol: float = 1e-12) -> bool:
    if N > 12:
        raise ValueError("N must be <= 12")
    direct = _mean(_teacher_values(_as_callable(teacher_v), N, T))
    return abs(pgd_recursion(teacher_v, N, T) - direct) <= tol


@dataclass
class ConvergenceRow:
    N: int
    error: float
    ratio: float | None


def convergence_table(field: AnalyticField, Ns=range(0, 13)) -> list[ConvergenceRow]:
    rows: list[ConvergenceRow] = []
    prev = None
    for N in Ns:
        _, err = pgd_average(field, field, N)
        ratio = None if prev is None or prev == 0.0 else err / prev
        rows.append(ConvergenceRow(N, err, ratio))
        prev = err
    return rows


def format_table(rows: list[ConvergenceRow]) -> str:
    lines = [f"{'N':>3}  {'error':>12}  {'ratio':>8}"]
    for r in rows:
        ratio = "" if r.ratio is None else f"{r.ratio:8.4f}"
        lines.append(f"{r.N:>3}  {r.error:12.4e}  {ratio:>8}")
    return "\n".join(lines)


@dataclass
class TheoryReport:
    checks: list[tuple[str, bool, str]]

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)


def verify_all(max_N: int = 12) -> TheoryReport:
    """Every identity check with its verdict and a short detail string."""
    checks = []
    lin = linear_field()
    errs = [pgd_average(lin, lin, N)[1] for N in range(1, max_N + 1)]
    worst = max(abs(e - 2.0 ** -N) for N, e in zip(range(1, max_N + 1), errs))
    checks.append(("pgd error of 2t equals 2^-N", worst <= 1e-12, f"max deviation {worst:.2e}"))
    for name, f in (("2t", lin), ("sin(2pi t)+2", periodic_field())):
        table = convergence_table(f, range(1, max_N + 1))
        ratios = [r.ratio for r in table if r.ratio is not None]
        ok = len(ratios) == max_N - 1 and all(0.4 <= q <= 0.6 for q in ratios)
        shown = ", ".join("undefined" if q is None else f"{q:.3g}" for q in [r.ratio for r in table[1:]])
        errors = ", ".join(f"{r.error:.2g}" for r in table)
        checks.append((f"pgd error ratio in [0.4, 0.6] for {name}", ok, f"errors {errors}; ratios {shown}"))
    eq = [pgd_recursion_equivalence(f, N) for f in (lin, periodic_field(), sine_field(), constant_field(3.0))
          for N in range(0, max_N + 1)]
    checks.append(("pgd recursion equals direct mean", all(eq), f"{sum(eq)}/{len(eq)} cases"))
    sin = sine_field()
    res = scm_residual(sin, h=1e-5)
    checks.append(("scm residual on sin(t) below 1e-6", res < 1e-6, f"residual {res:.2e}"))
    decay = residual_decay(sin)
    rates = [np.log10(a[1] / b[1]) / np.log10(a[0] / b[0]) for a, b in zip(decay, decay[1:])]
    checks.append(("scm residual decays as h^2", all(1.8 <= q <= 2.2 for q in rates),
                   "orders " + ", ".join(f"{q:.2f}" for q in rates)))
    return TheoryReport(checks)

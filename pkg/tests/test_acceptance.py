"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s``. Criteria 6 and 7 train
full sweeps (about 12 and 9 minutes on one CPU core).
"""

import math
import time

import numpy as np
import pytest

from hd_lab import adversarial as adv
from hd_lab import autodiff as ad
from hd_lab import dmd, meanflow as mf, nets, theory as th
from hd_lab.harness import experiment as ex
from hd_lab.nets import GraphModel

from oracles import central_dir, central_grad, long_power_sigma, rel_err


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. autodiff correctness

def random_net(rng):
    """Small random graph mixing the smooth primitives; returns the record and its leaves."""
    batch, d_in = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    rec = ad.Record()
    leaves = {"x": rng.normal(size=(batch, d_in))}
    h = rec.leaf("x", (batch, d_in))
    if rng.random() < 0.5:
        leaves["t"] = rng.uniform(size=batch)
        emb = ad.time_embed(rec.leaf("t", (batch,)), rng.uniform(0.5, 3.0, 2))
        h = ad.stack([h.sum(axis=1), emb.sum(axis=1)], axis=1)
        d_in = 2
    for i in range(int(rng.integers(1, 4))):
        width = int(rng.integers(2, 6))
        leaves[f"w{i}"] = rng.normal(size=(d_in, width)) / np.sqrt(d_in)
        leaves[f"b{i}"] = rng.normal(size=width) * 0.1
        h = ad.linear(h, rec.leaf(f"w{i}", (d_in, width)), rec.leaf(f"b{i}", (width,)))
        kind = rng.integers(5)
        if kind == 0:
            h = ad.silu(h)
        elif kind == 1:
            h = ad.softmax(h)
        elif kind == 2 and width > 2:
            # two-feature normalisation saturates to +-1; its tiny gradient is below the oracle's resolution
            h = ad.layernorm(h)
        elif kind == 3:
            h = ad.exp(h * 0.3)
        else:
            h = h * h / (1.0 + h * h)
        d_in = width
    rec.output("y", h)
    return rec, leaves


def test_criterion_1_autodiff(capsys):
    start = time.perf_counter()
    worst_g = worst_j = worst_t = 0.0
    n_nets = 120
    for i in range(n_nets):
        rng = np.random.default_rng(1000 + i)
        rec, leaves = random_net(rng)
        ev = ad.forward(rec, leaves)
        w_out = rng.normal(size=ev["y"].shape)
        grads = ad.backward(ev, {"y": w_out})
        for name, value in leaves.items():
            f = lambda v, name=name: float(np.sum(w_out * ad.forward(rec, {**leaves, name: v})["y"]))
            worst_g = max(worst_g, rel_err(grads[name], central_grad(f, value)))
        d = {k: rng.normal(size=v.shape) for k, v in leaves.items()}
        _, tan = ad.jvp(rec, leaves, d)
        names = list(leaves)
        flat = np.concatenate([leaves[k].ravel() for k in names])
        dflat = np.concatenate([d[k].ravel() for k in names])

        def f_all(v):
            parts, off = {}, 0
            for k in names:
                parts[k] = v[off:off + leaves[k].size].reshape(leaves[k].shape)
                off += leaves[k].size
            return ad.forward(rec, parts)["y"]

        worst_j = max(worst_j, rel_err(tan["y"], central_dir(f_all, flat, dflat)))
        lhs = sum(float(np.sum(grads[k] * d[k])) for k in names)
        rhs = float(np.sum(w_out * tan["y"]))
        worst_t = max(worst_t, abs(lhs - rhs) / max(1.0, abs(lhs)))
    secs = time.perf_counter() - start
    ok = worst_g < 1e-5 and worst_j < 1e-5 and worst_t < 1e-10 and secs < 30
    report(capsys, 1, ok, f"{n_nets} nets, grad rel {worst_g:.1e}, jvp rel {worst_j:.1e}, "
                          f"transpose {worst_t:.1e}, {secs:.1f}s")


# ---------------------------------------------------------------------------
# 2. mean-velocity target identity

def test_criterion_2_target_identity(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    n = 10_000
    t = rng.uniform(size=n)
    r = t * rng.uniform(size=n)
    x = rng.normal(size=(n, 2))
    # u(x, r, t) = (t^2 - r^2) / (t - r) = r + t for v(x, tau) = 2 tau
    exact = GraphModel(lambda rec, x, t, r, c: x * 0.0 + (t + r).reshape(n, 1), ("t", "r"))
    target = mf.mean_velocity_target(exact, np.repeat((2 * t)[:, None], 2, axis=1), x, r, t)
    err = float(np.max(np.abs(target - (r + t)[:, None])))
    secs = time.perf_counter() - start
    report(capsys, 2, err < 1e-10 and secs < 10, f"max error {err:.1e} over {n} (r, t), {secs:.1f}s")


# ---------------------------------------------------------------------------
# 3. distribution-matching stop-gradient equivalence

def test_criterion_3_dmd_gradient(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    teacher = nets.build(nets.SIZES["S"], ("t",), seed=5)
    branches = dmd.ScoreBranches.from_teacher(teacher)
    for k in branches.fake.params:
        branches.fake.params[k] += 0.05 * rng.normal(size=branches.fake.params[k].shape)
    gen = nets.build(nets.SIZES["S"], ("t", "r"), seed=6)
    n = 4
    x1, t, noise = rng.normal(size=(n, 2)), rng.uniform(0.2, 0.9, n), rng.normal(size=(n, 2))
    _, grads, sample = dmd.dmd_loss_and_grad(gen, branches, x1, t, noise)
    got, ref = [], []
    h = 1e-6
    for name, p in gen.params.items():
        flat = p.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = dmd.generate(gen, x1)
            flat[j] = old - h
            dn = dmd.generate(gen, x1)
            flat[j] = old
            ref.append(2.0 * float(np.sum(sample.grad * (up - dn) / (2 * h))) / n)
        got.append(grads["gen.net." + name].reshape(-1))
    err = rel_err(np.concatenate(got), np.array(ref))
    secs = time.perf_counter() - start
    report(capsys, 3, err < 1e-4 and secs < 120,
           f"{len(ref)} parameters, relative error {err:.1e}, {secs:.1f}s")


# ---------------------------------------------------------------------------
# 4. piecewise average convergence

def test_criterion_4_average_convergence(capsys):
    start = time.perf_counter()
    lin = th.linear_field()
    lin_err = max(abs(th.pgd_average(lin, lin, N)[1] - 2.0 ** -N) for N in range(1, 13))
    per = th.periodic_field()
    errs = [th.pgd_average(per, per, N)[1] for N in range(0, 13)]
    ratios = [b / a if a > 0 else math.nan for a, b in zip(errs, errs[1:])]
    ratio_ok = all(0.4 <= q <= 0.6 for q in ratios)
    rec_ok = all(th.pgd_recursion_equivalence(f, N) for f in (lin, th.sine_field(), per) for N in range(13))
    secs = time.perf_counter() - start
    shown = ", ".join("nan" if math.isnan(q) else f"{q:.2g}" for q in ratios[:4])
    report(capsys, 4, lin_err <= 1e-12 and ratio_ok and rec_ok and secs < 5,
           f"2t error off 2^-N by {lin_err:.1e}; periodic ratios in [0.4, 0.6]: {ratio_ok} "
           f"(first {shown}, errors max {max(errs):.1e}); recursion equivalence {rec_ok}; {secs:.2f}s")


# ---------------------------------------------------------------------------
# 5. consistency residual

def test_criterion_5_residual(capsys):
    start = time.perf_counter()
    res = th.scm_residual(th.sine_field(), th.default_grid(), 1e-5)
    decay = th.residual_decay(th.sine_field(), (1e-3, 1e-4, 1e-5))
    orders = [math.log10(a[1] / b[1]) / math.log10(a[0] / b[0]) for a, b in zip(decay, decay[1:])]
    secs = time.perf_counter() - start
    ok = res < 1e-6 and all(1.8 <= q <= 2.2 for q in orders) and secs < 5
    report(capsys, 5, ok, f"residual {res:.2e} at h=1e-5, orders {[round(q, 2) for q in orders]}, {secs:.2f}s")


# ---------------------------------------------------------------------------
# 6. size sweep trend

# budgets sized so each run fits its time limit on one CPU core
SWEEP_BASE = dict(teacher_iters=1500, td_iters=1500, batch_size=64, probe_size=1024, eval_every=0)
GRID_BASE = dict(teacher_iters=2000, td_iters=2000, batch_size=64, probe_size=1024, eval_every=0)


@pytest.mark.slow
def test_criterion_6_size_sweep(capsys, monkeypatch):
    monkeypatch.setattr(ad, "CHECKED", False)
    start = time.perf_counter()
    sizes = list(nets.SIZES)
    table = ex.size_sweep(sizes, [0, 1, 2, 3, 4], ex.ExperimentConfig(**SWEEP_BASE))
    secs = time.perf_counter() - start
    med = table.medians()
    student = [med[s]["student"] for s in sizes]
    teacher = [med[s]["teacher"] for s in sizes]
    decreasing = all(b < a for a, b in zip(student, student[1:]))
    t_spread = max(teacher) / min(teacher)
    s_spread = max(student) / min(student)
    above = student[-1] > teacher[-1]
    ok = decreasing and t_spread < 2 and s_spread > 2 and above and secs < 900
    report(capsys, 6, ok,
           f"student {[round(v, 4) for v in student]} strictly decreasing {decreasing}; "
           f"teacher {[round(v, 4) for v in teacher]}; teacher spread {t_spread:.2f}x (<2), "
           f"student spread {s_spread:.2f}x (>2); student above teacher at XXXL {above}; {secs:.0f}s")


# ---------------------------------------------------------------------------
# 7. ablation ordering

GRID_ARMS = ["TD-only", "DMD-only", "TD+DMD", "TD+DMD+GAP", "TD+DMD+AWD"]
GRID_PAIRS = [("TD+DMD+AWD", "TD+DMD+GAP"), ("TD+DMD+GAP", "TD+DMD"), ("TD+DMD", "TD-only"), ("TD+DMD", "DMD-only")]


@pytest.mark.slow
def test_criterion_7_ablation_ordering(capsys, monkeypatch):
    monkeypatch.setattr(ad, "CHECKED", False)
    start = time.perf_counter()
    base = ex.ExperimentConfig(size="XL", dmd=True, stage2_iters=1000, **GRID_BASE)
    table = ex.ablation_grid([0, 1, 2, 3, 4], base, GRID_ARMS)
    secs = time.perf_counter() - start
    med = table.medians()
    checks = [(f"{a} <= {b}", med[a] <= med[b]) for a, b in GRID_PAIRS]
    ok = all(v for _, v in checks) and secs < 1200
    report(capsys, 7, ok, f"medians {{{', '.join(f'{a}: {med[a]:.4f}' for a in GRID_ARMS)}}}; "
                          f"{'; '.join(f'{name} {v}' for name, v in checks)}; {secs:.0f}s")


# ---------------------------------------------------------------------------
# 8. structural invariants

def test_criterion_8_structure(capsys):
    rng = np.random.default_rng(8)
    worst_sum, min_w, n_inputs = 0.0, 1.0, 0
    for seed in range(100):
        head = nets.build_discriminator("awd", 8, seed=seed)
        _, w = nets.awd_score(head, rng.normal(size=(100, int(rng.integers(1, 9)), 8)) * rng.uniform(0.1, 10))
        worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(-1) - 1.0))))
        min_w = min(min_w, float(w.min()))
        n_inputs += w.shape[0]
    awd_ok = worst_sum <= 1e-9 and min_w >= 0.0

    min_hinge = math.inf
    for i in range(1000):
        head = nets.build_discriminator("awd" if i % 2 else "gap", 8, seed=i)
        head.params["out.b"][:] = rng.normal() * 3
        real, fake = rng.normal(size=(2, 4, 3, 8)) * rng.uniform(0.1, 10)
        loss, _, _ = adv.discriminator_loss_and_grad(head, real, fake, refresh_sn=False)
        min_hinge = min(min_hinge, loss)
    hinge_ok = min_hinge >= 0.0

    # the in-graph estimate after one refresh per training step, over a stage-2 length run
    worst_sigma = 0.0
    for seed in range(5):
        head = nets.build_discriminator("awd", 32, seed=seed)
        for _ in range(1000):
            leaves = head.sn_leaves("disc.", refresh=True)
        for name in nets.SN_MATRICES:
            u = head.sn[name].u
            w = head.params[name]
            v = w.T @ u
            sigma = float(u @ w @ (v / np.linalg.norm(v)))
            worst_sigma = max(worst_sigma, abs(long_power_sigma(w / sigma, 1000) - 1.0))
    for _ in range(50):
        w = rng.normal(size=tuple(rng.integers(2, 40, 2)))
        worst_sigma = max(worst_sigma, abs(long_power_sigma(nets.spectral_normalize(w, 200), 1000) - 1.0))
    sn_ok = worst_sigma < 1e-3

    worst_count = max(abs(nets.build(nets.SIZES[s], ("t", "r")).num_params - ref) / ref
                      for s, ref in nets.REFERENCE_PARAMS.items())
    count_ok = worst_count <= 0.15 and len(nets.REFERENCE_PARAMS) == 6
    report(capsys, 8, awd_ok and hinge_ok and sn_ok and count_ok,
           f"AWD sums off by {worst_sum:.1e}, min weight {min_w:.1e} ({n_inputs} inputs); "
           f"min hinge loss {min_hinge:.3f} (1000 batches); sigma off by {worst_sigma:.1e}; "
           f"parameter counts within {100 * worst_count:.1f}%")


# ---------------------------------------------------------------------------
# 9. determinism

def test_criterion_9_determinism(capsys, tmp_path):
    cfg = ex.ExperimentConfig(size="B", teacher_iters=100, td_iters=60, stage2_iters=30, batch_size=32,
                              probe_size=256, eval_every=10, dmd=True, adversarial="awd", seed=9)
    ex.run_pipeline(cfg, tmp_path / "a")
    ex.run_pipeline(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    report(capsys, 9, a == b and len(a) > 0, f"metrics.csv {len(a)} bytes, identical {a == b}")

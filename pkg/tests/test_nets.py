import numpy as np
import pytest

from hd_lab import autodiff as ad
from hd_lab import nets

from oracles import central_grad, long_power_sigma, rel_err, velocity_net_forward


def test_param_counts_near_reference():
    for label, ref in nets.REFERENCE_PARAMS.items():
        n = nets.build(nets.SIZES[label], ("t", "r")).num_params
        assert abs(n - ref) / ref < 0.15, (label, n, ref)


def test_param_counts_increase_with_size():
    counts = [nets.build(nets.SIZES[s], ("t",)).num_params for s in nets.SIZES]
    assert counts == sorted(counts) and len(set(counts)) == len(counts)


def test_same_seed_same_params():
    a = nets.build(nets.SIZES["B"], ("t", "r"), seed=3)
    b = nets.build(nets.SIZES["B"], ("t", "r"), seed=3)
    assert a.checksum() == b.checksum()
    assert nets.build(nets.SIZES["B"], ("t", "r"), seed=4).checksum() != a.checksum()


def test_unknown_size_rejected():
    with pytest.raises(ValueError):
        nets.size_config("M")


def test_forward_matches_numpy_reference(rng):
    net = nets.build(nets.SIZES["L"], ("t", "r"), seed=1)
    x = rng.normal(size=(5, 2))
    t = rng.uniform(size=5)
    r = t * rng.uniform(size=5)
    per = net.config.hidden_dim // 4
    ref, tokens = velocity_net_forward(net.params, x, t, r, nets.embed_freqs(per), net.config.layers)
    np.testing.assert_allclose(nets.eval_net(net, x, t, r), ref, rtol=1e-12, atol=1e-13)
    teacher = nets.build(nets.SIZES["L"], ("t",), seed=1)
    _, tok = velocity_net_forward(teacher.params, x, t, None, nets.embed_freqs(teacher.config.hidden_dim // 2),
                                  teacher.config.layers)
    np.testing.assert_allclose(nets.block_tokens(teacher, x, t), tok, rtol=1e-12, atol=1e-13)


def test_zero_output_projection_gives_zero(rng):
    net = nets.build(nets.SIZES["S"], ("t",))
    net.params["out.w2"][:] = 0.0
    net.params["out.b2"][:] = 0.0
    out = nets.eval_net(net, rng.normal(size=(6, 2)), rng.uniform(size=6))
    assert np.all(out == 0.0)


def test_eval_is_deterministic(rng):
    net = nets.build(nets.SIZES["S"], ("t",))
    x, t = rng.normal(size=(4, 2)), rng.uniform(size=4)
    assert nets.eval_net(net, x, t).tobytes() == nets.eval_net(net, x, t).tobytes()


def test_weight_perturbation_matches_gradient(rng):
    net = nets.build(nets.SIZES["S"], ("t",), seed=2)
    x, t = rng.normal(size=(3, 2)), rng.uniform(size=3)
    rec = nets.net_record(net, 3)
    leaves = nets.net_inputs(net, x, t)
    leaves.update(nets.bind(net))
    ev = ad.forward(rec, leaves)
    g = ad.backward(ev, {"out": np.ones((3, 2))}, wrt=["net.blocks.0.w1"])["net.blocks.0.w1"]
    w0 = net.params["blocks.0.w1"].copy()

    def f(w):
        net.params["blocks.0.w1"] = w
        return float(nets.eval_net(net, x, t).sum())

    fd = central_grad(f, w0)
    net.params["blocks.0.w1"] = w0
    assert rel_err(g, fd) < 1e-6


def test_time_outside_unit_interval_rejected():
    net = nets.build(nets.SIZES["S"], ("t", "r"))
    with pytest.raises(ValueError):
        nets.eval_net(net, np.zeros((1, 2)), 1.5, 0.0)
    with pytest.raises(ValueError):
        nets.eval_net(net, np.zeros((1, 2)), 0.5, -0.1)


def test_zero_block_is_identity(rng):
    net = nets.build(nets.SIZES["L"], ("t",), seed=5)
    x, t = rng.normal(size=(4, 2)), rng.uniform(size=4)
    before = nets.block_tokens(net, x, t)
    net.params["blocks.2.w2"][:] = 0.0
    net.params["blocks.2.b2"][:] = 0.0
    after = nets.block_tokens(net, x, t)
    np.testing.assert_array_equal(after[:, 2], after[:, 1])
    np.testing.assert_array_equal(after[:, :2], before[:, :2])


def test_class_conditional_requires_classes():
    with pytest.raises(ValueError):
        nets.build(nets.SIZES["S"], ("t", "c"), n_classes=0)
    net = nets.build(nets.SIZES["S"], ("t", "c"), n_classes=2)
    out_null = nets.eval_net(net, np.zeros((2, 2)), 0.5)
    out_c0 = nets.eval_net(net, np.zeros((2, 2)), 0.5, c=0)
    assert not np.allclose(out_null, out_c0)


def test_checkpoint_roundtrip(tmp_path):
    net = nets.build(nets.SIZES["B"], ("t", "r"), seed=9)
    path = nets.save_net(net, tmp_path / "n.json")
    back = nets.load_net(path)
    assert back.checksum() == net.checksum()
    assert back.conditioning == net.conditioning


# discriminator heads

def head(variant, dim=6, seed=0):
    return nets.build_discriminator(variant, dim, seed=seed)


def test_identical_tokens_give_uniform_weights(rng):
    tok = np.repeat(rng.normal(size=(1, 6)), 5, axis=0)
    _, w = nets.awd_score(head("awd"), tok)
    np.testing.assert_allclose(w, np.full((1, 5), 0.2), rtol=1e-14)


def test_single_token_weight_is_one(rng):
    _, w = nets.awd_score(head("awd"), rng.normal(size=(1, 6)))
    assert float(w[0, 0]) == 1.0


def test_constant_logits_make_awd_equal_gap(rng):
    h = head("awd")
    h.params["q"][:] = 0.0
    g = head("gap")
    g.params = h.params
    g.sn = h.sn
    tok = rng.normal(size=(3, 4, 6))
    s_awd, w = nets.awd_score(h, tok)
    np.testing.assert_allclose(w, 0.25)
    np.testing.assert_allclose(s_awd, nets.gap_score(g, tok), rtol=1e-12, atol=1e-14)


def test_gap_duplicate_token_idempotent(rng):
    h = head("gap")
    a = rng.normal(size=6)
    np.testing.assert_allclose(nets.gap_score(h, [a[None], a[None]]), nets.gap_score(h, [a[None]]), rtol=1e-13)


def test_gap_permutation_invariant(rng):
    h = head("gap")
    tok = rng.normal(size=(2, 5, 6))
    perm = rng.permutation(5)
    np.testing.assert_allclose(nets.gap_score(h, tok), nets.gap_score(h, tok[:, perm]), rtol=1e-12)


def test_gap_pools_by_mean_of_values(rng):
    # brute-force mean of the projected tokens, with sigma from a long power iteration
    h = head("gap")
    for _ in range(500):
        h.sn_leaves("disc.", refresh=True)
    tok = rng.normal(size=(1, 4, 6))
    ln = (tok - tok.mean(-1, keepdims=True)) / np.sqrt(tok.var(-1, keepdims=True) + 1e-5)
    z = ln * h.params["ln.g"] + h.params["ln.b"]
    sig = {k: long_power_sigma(h.params[k], 1000) for k in ("v.w", "out.w")}
    vals = z @ (h.params["v.w"] / sig["v.w"]) + h.params["v.b"]
    pooled = vals.mean(axis=1)
    act = pooled / (1 + np.exp(-pooled))
    ref = act @ (h.params["out.w"] / sig["out.w"]) + h.params["out.b"]
    np.testing.assert_allclose(nets.gap_score(h, tok), ref[:, 0], rtol=1e-9)


def test_empty_tokens_rejected():
    with pytest.raises(ValueError):
        nets.awd_score(head("awd"), [])
    with pytest.raises(ValueError):
        nets.gap_score(head("gap"), np.zeros((1, 0, 6)))


def test_awd_weights_are_a_distribution(rng):
    for seed in range(100):
        h = head("awd", seed=seed)
        _, w = nets.awd_score(h, rng.normal(size=(3, 7, 6)) * 3)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_spectral_normalize_identity():
    np.testing.assert_allclose(nets.spectral_normalize(np.eye(2)), np.eye(2), atol=1e-15)


def test_spectral_normalize_diagonal():
    out = nets.spectral_normalize(np.diag([4.0, 1.0]), iterations=50)
    np.testing.assert_allclose(out, np.diag([1.0, 0.25]), rtol=1e-12)


def test_spectral_normalize_random(rng):
    w = rng.normal(size=(8, 8))
    out = nets.spectral_normalize(w, iterations=100)
    assert abs(long_power_sigma(out, 1000) - 1.0) < 1e-3


def test_spectral_normalize_zero_matrix():
    z = np.zeros((3, 3))
    np.testing.assert_array_equal(nets.spectral_normalize(z), z)


def test_spectral_normalize_needs_iterations():
    with pytest.raises(ValueError):
        nets.spectral_normalize(np.eye(2), iterations=0)


def test_head_weights_normalised_in_graph(rng):
    # one power step per training step; after enough steps on fixed weights the estimate is exact
    h = head("awd", dim=16)
    for _ in range(1000):
        h.sn_leaves("disc.", refresh=True)
    for name in nets.SN_MATRICES:
        w = h.params[name]
        u = h.sn[name].u
        v = w.T @ u
        v /= np.linalg.norm(v)
        sigma = float(u @ w @ v)
        assert abs(long_power_sigma(w / sigma, 1000) - 1.0) < 1e-3


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        nets.build_discriminator("mlp", 4)

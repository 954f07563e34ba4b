"""Neural graph-diffusion expert: structural invariants of the refined
adjacency (row-stochastic, rank bounded by the latent width), a full loop
reimplementation as value oracle, and tape gradients against central
differences."""

import numpy as np
import pytest

from conftest import central_diff, rel_err, ring_connectome
from trajmoe import autodiff as ad
from trajmoe.autodiff import ParamStore, Tape
from trajmoe.errors import NonFiniteInput
from trajmoe.graph import Connectome, build_operators
from trajmoe.ignd import IgndBuilder, IgndConfig, encode, eval_f_S, init_ignd_params

CFG = IgndConfig(latent_dim=3, encoder_widths=(5,), prop_hidden=4, prop_out=4,
                 dec_widths=(5,))


def make_params(cfg, n, seed=0, randomize_last=False):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_ignd_params(cfg, n, rng, store)
    if randomize_last:
        i = len(cfg.dec_widths)
        store[f"ignd.dec{i}.W"] = rng.normal(size=store[f"ignd.dec{i}.W"].shape)
        store[f"ignd.dec{i}.b"] = rng.normal(size=store[f"ignd.dec{i}.b"].shape)
    return store


def loop_forward(store, cfg, g: Connectome, c, t_norm):
    """Per-node/per-edge reimplementation of the whole expert with explicit
    Python loops; the graph-free oracle for eval_f_S."""
    n = g.n
    a = g.adjacency

    def dense(name, x):
        return x @ store[f"ignd.{name}.W"] + store[f"ignd.{name}.b"]

    # edge messages gated by adjacency, aggregated per node
    agg = np.zeros((n, cfg.prop_out))
    for u in range(n):
        for v in range(n):
            msg = dense("prop1", np.tanh(dense("prop0", np.array([c[u], c[v]]))))
            agg[u] += a[u, v] * msg
    # encoder per node
    h = np.zeros((n, cfg.latent_dim))
    for u in range(n):
        x = np.concatenate([[c[u]], agg[u]])
        if cfg.time_encoding == "scalar-append":
            x = np.concatenate([x, [t_norm]])
        widths = len(cfg.encoder_widths) + 1
        for i in range(widths):
            x = dense(f"enc{i}", x)
            if i < widths - 1:
                x = np.tanh(x)
        h[u] = x
    # refined adjacency, row-normalized
    sim = 1.0 / (1.0 + np.exp(-(h @ h.T)))
    if cfg.mask_to_support:
        mask = (a > 0).astype(float)
        np.fill_diagonal(mask, 1.0)
        sim = sim * mask
    a_hat = sim / sim.sum(axis=1, keepdims=True)
    # one propagation step + decoder per node
    prop = a_hat @ h
    out = np.zeros(n)
    for u in range(n):
        x = np.concatenate([h[u], prop[u]])
        widths = len(cfg.dec_widths) + 1
        for i in range(widths):
            x = dense(f"dec{i}", x)
            if i < widths - 1:
                x = np.tanh(x)
        out[u] = x[0]
    return out, h, a_hat


def test_matches_loop_oracle():
    g = ring_connectome(6, weight=0.8)
    ops = build_operators(g)
    store = make_params(CFG, 6, seed=2, randomize_last=True)
    c = np.random.default_rng(9).random(6)
    got = eval_f_S(store, CFG, ops, c, t=3.0, t_horizon=12.0)
    want, h_want, a_want = loop_forward(store, CFG, g, c, 3.0 / 12.0)
    assert rel_err(got, want) < 1e-12
    latent = encode(store, CFG, ops, c, t=3.0, t_horizon=12.0)
    assert rel_err(latent.h, h_want) < 1e-12
    assert rel_err(latent.a_hat, a_want) < 1e-12


def test_refined_adjacency_row_stochastic_and_positive():
    g = ring_connectome(7)
    ops = build_operators(g)
    store = make_params(CFG, 7, seed=4, randomize_last=True)
    rng = np.random.default_rng(1)
    for _ in range(5):
        latent = encode(store, CFG, ops, rng.random(7), t=rng.random(), t_horizon=1.0)
        assert np.allclose(latent.a_hat.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(latent.a_hat > 0)


def test_similarity_rank_bounded_by_latent_dim():
    n = 9
    cfg = IgndConfig(latent_dim=2, encoder_widths=(5,), prop_hidden=4, prop_out=4,
                     dec_widths=(5,))
    ops = build_operators(ring_connectome(n))
    store = make_params(cfg, n, seed=6)
    latent = encode(store, cfg, ops, np.random.default_rng(0).random(n), t=0.5)
    assert latent.h.shape == (n, 2)
    # h h^T has rank <= latent_dim even though it is n x n
    s = np.linalg.svd(latent.h @ latent.h.T, compute_uv=False)
    assert s[2] < 1e-10 * s[0]


def test_zero_initialized_readout_gives_zero_field():
    ops = build_operators(ring_connectome(5))
    store = make_params(CFG, 5, seed=8)  # default init: last decoder layer zero
    c = np.random.default_rng(2).random(5)
    assert np.allclose(eval_f_S(store, CFG, ops, c, t=0.3), 0.0, atol=1e-15)


def test_permutation_equivariance():
    """Relabelling regions permutes the output the same way (shared weights,
    graph-structured propagation)."""
    n = 6
    rng = np.random.default_rng(12)
    a = np.triu(rng.random((n, n)), k=1)
    a = a + a.T
    g = Connectome(region_names=tuple(f"r{i}" for i in range(n)), adjacency=a)
    perm = rng.permutation(n)
    g_p = Connectome(region_names=tuple(f"r{i}" for i in range(n)),
                     adjacency=a[np.ix_(perm, perm)])
    store = make_params(CFG, n, seed=3, randomize_last=True)
    c = rng.random(n)
    out = eval_f_S(store, CFG, build_operators(g), c, t=0.4)
    out_p = eval_f_S(store, CFG, build_operators(g_p), c[perm], t=0.4)
    assert rel_err(out_p, out[perm]) < 1e-12


def test_mask_to_support_zeroes_nonedges():
    n = 6
    cfg = IgndConfig(latent_dim=3, encoder_widths=(4,), prop_hidden=3, prop_out=3,
                     dec_widths=(4,), mask_to_support=True)
    g = ring_connectome(n)
    ops = build_operators(g)
    store = make_params(cfg, n, seed=5, randomize_last=True)
    latent = encode(store, cfg, ops, np.random.default_rng(3).random(n), t=0.2)
    support = (g.adjacency > 0)
    np.fill_diagonal(support, True)
    assert np.all(latent.a_hat[~support] == 0.0)
    assert np.allclose(latent.a_hat.sum(axis=1), 1.0, atol=1e-12)


def test_time_encoding_none_is_autonomous():
    cfg = IgndConfig(latent_dim=3, encoder_widths=(4,), prop_hidden=3, prop_out=3,
                     dec_widths=(4,), time_encoding="none")
    ops = build_operators(ring_connectome(5))
    store = make_params(cfg, 5, seed=7, randomize_last=True)
    c = np.random.default_rng(4).random(5)
    assert np.array_equal(eval_f_S(store, cfg, ops, c, t=0.0, t_horizon=12.0),
                          eval_f_S(store, cfg, ops, c, t=9.0, t_horizon=12.0))


def test_tape_gradients_against_central_differences():
    n = 4
    cfg = IgndConfig(latent_dim=2, encoder_widths=(3,), prop_hidden=2, prop_out=2,
                     dec_widths=(3,))
    g = ring_connectome(n)
    ops = build_operators(g)
    store = make_params(cfg, n, seed=11, randomize_last=True)
    c = np.random.default_rng(5).random(n)
    up = np.random.default_rng(6).normal(size=n)
    t_norm = 0.35

    def scalar(flat):
        s = store.copy()
        s.set_flat(flat)
        tape = Tape(grad=False)
        leaves = {k: tape.constant(v) for k, v in s.items()}
        out = IgndBuilder(cfg, ops).build_f_S(leaves, tape, tape.constant(c), t_norm)
        return float(up @ out.value)

    tape = Tape()
    leaves = ad.bind_params(tape, store)
    out = IgndBuilder(cfg, ops).build_f_S(leaves, tape, tape.constant(c), t_norm)
    tape.backward(out, upstream=up)
    got = ad.grads_flat(store, leaves)
    want = central_diff(scalar, store.flat())
    assert rel_err(got, want) < 1e-6


def test_state_gradient_against_central_differences():
    n = 4
    ops = build_operators(ring_connectome(n))
    store = make_params(CFG, n, seed=13, randomize_last=True)
    c = np.random.default_rng(7).random(n)
    up = np.random.default_rng(8).normal(size=n)

    def scalar(cc):
        return float(up @ eval_f_S(store, CFG, ops, cc, t=0.2))

    tape = Tape()
    leaves = {k: tape.constant(v) for k, v in store.items()}
    c_node = tape.leaf(c)
    out = IgndBuilder(CFG, ops).build_f_S(leaves, tape, c_node, 0.2)
    tape.backward(out, upstream=up)
    assert rel_err(c_node.grad, central_diff(scalar, c)) < 1e-6


def test_nonfinite_state_rejected():
    ops = build_operators(ring_connectome(3))
    cfg = IgndConfig(latent_dim=2, encoder_widths=(3,), prop_hidden=2, prop_out=2,
                     dec_widths=(3,))
    store = make_params(cfg, 3, seed=1)
    with pytest.raises(NonFiniteInput):
        eval_f_S(store, cfg, ops, np.array([0.1, np.inf, 0.2]), t=0.0)

"""Reverse-mode tape: every primitive's VJP against central differences,
plus the bookkeeping contracts (single backward, value-only mode, parameter
store round-trips)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from trajmoe import autodiff as ad
from trajmoe.autodiff import Node, ParamStore, Tape
from trajmoe.errors import NonFiniteDetected, ShapeMismatch, TapeConsumed

RNG = np.random.default_rng(1234)


def check_unary(op, x, eps=1e-6, tol=1e-7):
    """Tape gradient of sum(op(x)) vs central differences."""
    shape = x.shape

    def value(v):
        t = Tape()
        out = ad.reduce_sum(op(t.leaf(v.reshape(shape))))
        return float(out.value)

    tape = Tape()
    leaf = tape.leaf(x)
    out = ad.reduce_sum(op(leaf))
    tape.backward(out)
    got = leaf.grad.ravel()
    want = central_diff(value, x.ravel(), eps=eps)
    assert rel_err(got, want) < tol


def test_tanh_sigmoid_softplus_relu_sqrt_reciprocal_grads():
    x = RNG.normal(size=(4, 3))
    check_unary(ad.tanh, x)
    check_unary(ad.sigmoid, x)
    check_unary(ad.softplus, x)
    # keep points away from the relu kink and sqrt/reciprocal poles
    check_unary(ad.relu, x + np.sign(x) * 0.2)
    check_unary(ad.sqrt, np.abs(x) + 0.5)
    check_unary(ad.reciprocal, np.abs(x) + 0.5)


def test_matmul_grads_all_shape_modes():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    v = RNG.normal(size=4)
    u = RNG.normal(size=3)

    # (3,4) @ (4,2): gradient w.r.t. both operands
    def f_ab(flat):
        t = Tape()
        aa = t.leaf(flat[:12].reshape(3, 4))
        bb = t.leaf(flat[12:].reshape(4, 2))
        return float(ad.reduce_sum(ad.matmul(aa, bb)).value)

    tape = Tape()
    na, nb = tape.leaf(a), tape.leaf(b)
    tape.backward(ad.reduce_sum(ad.matmul(na, nb)))
    got = np.concatenate([na.grad.ravel(), nb.grad.ravel()])
    want = central_diff(f_ab, np.concatenate([a.ravel(), b.ravel()]))
    assert rel_err(got, want) < 1e-8

    # (3,4) @ (4,): weight a sum with random coefficients to break symmetry
    w = RNG.normal(size=3)

    def f_av(flat):
        t = Tape()
        aa = t.leaf(flat[:12].reshape(3, 4))
        vv = t.leaf(flat[12:])
        y = ad.matmul(aa, vv)
        return float(ad.reduce_sum(ad.hadamard(y, t.constant(w))).value)

    tape = Tape()
    na, nv = tape.leaf(a), tape.leaf(v)
    y = ad.matmul(na, nv)
    tape.backward(ad.reduce_sum(ad.hadamard(y, tape.constant(w))))
    got = np.concatenate([na.grad.ravel(), nv.grad])
    want = central_diff(f_av, np.concatenate([a.ravel(), v]))
    assert rel_err(got, want) < 1e-8

    # (3,) @ (3,4)
    def f_ua(flat):
        t = Tape()
        uu = t.leaf(flat[:3])
        aa = t.leaf(flat[3:].reshape(3, 4))
        return float(ad.reduce_sum(ad.matmul(uu, aa)).value)

    tape = Tape()
    nu, na = tape.leaf(u), tape.leaf(a)
    tape.backward(ad.reduce_sum(ad.matmul(nu, na)))
    got = np.concatenate([nu.grad, na.grad.ravel()])
    want = central_diff(f_ua, np.concatenate([u, a.ravel()]))
    assert rel_err(got, want) < 1e-8


def test_add_sub_broadcast_rowvec_grads():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=4)
    w = RNG.normal(size=(3, 4))

    def f(flat):
        t = Tape()
        aa = t.leaf(flat[:12].reshape(3, 4))
        bb = t.leaf(flat[12:])
        y = ad.sub(ad.add(aa, bb), ad.scale(bb, 0.25))
        return float(ad.reduce_sum(ad.hadamard(y, t.constant(w))).value)

    tape = Tape()
    na, nb = tape.leaf(a), tape.leaf(b)
    y = ad.sub(ad.add(na, nb), ad.scale(nb, 0.25))
    tape.backward(ad.reduce_sum(ad.hadamard(y, tape.constant(w))))
    got = np.concatenate([na.grad.ravel(), nb.grad])
    want = central_diff(f, np.concatenate([a.ravel(), b]))
    assert rel_err(got, want) < 1e-8


def test_hadamard_same_and_colvec_grads():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(3, 4))
    c = RNG.normal(size=3)

    def f(flat):
        t = Tape()
        aa = t.leaf(flat[:12].reshape(3, 4))
        bb = t.leaf(flat[12:24].reshape(3, 4))
        cc = t.leaf(flat[24:])
        return float(ad.reduce_sum(ad.hadamard(ad.hadamard(aa, bb), cc)).value)

    tape = Tape()
    na, nb, nc = tape.leaf(a), tape.leaf(b), tape.leaf(c)
    tape.backward(ad.reduce_sum(ad.hadamard(ad.hadamard(na, nb), nc)))
    got = np.concatenate([na.grad.ravel(), nb.grad.ravel(), nc.grad])
    want = central_diff(f, np.concatenate([a.ravel(), b.ravel(), c]))
    assert rel_err(got, want) < 1e-8


def test_softmax_simplex_and_grad():
    z = RNG.normal(size=5) * 3.0
    tape = Tape()
    leaf = tape.leaf(z)
    y = ad.softmax(leaf)
    assert np.all(y.value > 0)
    assert abs(y.value.sum() - 1.0) < 1e-12

    w = RNG.normal(size=5)

    def f(v):
        t = Tape()
        out = ad.hadamard(ad.softmax(t.leaf(v)), t.constant(w))
        return float(ad.reduce_sum(out).value)

    tape = Tape()
    leaf = tape.leaf(z)
    tape.backward(ad.reduce_sum(ad.hadamard(ad.softmax(leaf), tape.constant(w))))
    assert rel_err(leaf.grad, central_diff(f, z)) < 1e-7


def test_softmax_shift_invariance():
    z = RNG.normal(size=4)
    t = Tape(grad=False)
    y1 = ad.softmax(t.constant(z)).value
    y2 = ad.softmax(t.constant(z + 500.0)).value  # overflow-safe
    assert np.allclose(y1, y2, atol=1e-12)
    assert np.all(np.isfinite(y2))


def test_transpose_reshape_concat_grads():
    a = RNG.normal(size=(3, 2))
    b = RNG.normal(size=3)
    w = RNG.normal(size=(3, 3))

    def f(flat):
        t = Tape()
        aa = t.leaf(flat[:6].reshape(3, 2))
        bb = t.leaf(flat[6:])
        cat = ad.concat_cols(aa, bb)  # (3, 3)
        y = ad.matmul(ad.transpose(cat), t.constant(w))  # (3, 3)
        return float(ad.reduce_sum(ad.reshape(y, (9,))).value)

    tape = Tape()
    na, nb = tape.leaf(a), tape.leaf(b)
    cat = ad.concat_cols(na, nb)
    y = ad.matmul(ad.transpose(cat), tape.constant(w))
    tape.backward(ad.reduce_sum(ad.reshape(y, (9,))))
    got = np.concatenate([na.grad.ravel(), nb.grad])
    want = central_diff(f, np.concatenate([a.ravel(), b]))
    assert rel_err(got, want) < 1e-8


def test_diamond_graph_accumulates_both_paths():
    # y = sum(x*x + x) reuses the same leaf along two paths; analytic
    # gradient is 2x + 1
    x = RNG.normal(size=4)
    tape = Tape()
    leaf = tape.leaf(x)
    y = ad.add(ad.hadamard(leaf, leaf), leaf)
    tape.backward(ad.reduce_sum(y))
    assert np.allclose(leaf.grad, 2.0 * x + 1.0, atol=1e-12)


def test_lift_fused_op_grad():
    # custom op y = x^3 with hand-written vjp participates like a primitive
    x = RNG.normal(size=3)
    tape = Tape()
    leaf = tape.leaf(x)

    def vjp(up):
        return [3.0 * x * x * up]

    y = ad.lift(tape, x ** 3, [leaf], vjp, kind="cube")
    tape.backward(ad.reduce_sum(y))
    assert np.allclose(leaf.grad, 3.0 * x * x, atol=1e-12)


def test_backward_twice_raises():
    tape = Tape()
    leaf = tape.leaf(np.ones(2))
    out = ad.reduce_sum(ad.tanh(leaf))
    tape.backward(out)
    with pytest.raises(TapeConsumed):
        tape.backward(out)


def test_value_only_tape_records_nothing():
    tape = Tape(grad=False)
    leaf = tape.leaf(np.ones(3))
    out = ad.reduce_sum(ad.tanh(ad.hadamard(leaf, leaf)))
    assert out.value == pytest.approx(3.0 * np.tanh(1.0))
    assert tape.nodes == []
    assert not out.requires


def test_strict_tape_flags_nonfinite():
    tape = Tape(grad=False, strict=True)
    x = tape.constant(np.array([1.0, 0.0]))
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteDetected):
            ad.reciprocal(x)


def test_shape_mismatch_errors():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.matmul(a, b)
    with pytest.raises(ShapeMismatch):
        ad.add(a, tape.leaf(np.ones(2)))
    with pytest.raises(ShapeMismatch):
        ad.softmax(a)


def test_constant_parents_get_no_grad():
    tape = Tape()
    leaf = tape.leaf(np.ones(3))
    const = tape.constant(np.arange(3.0))
    out = ad.reduce_sum(ad.hadamard(leaf, const))
    tape.backward(out)
    assert np.allclose(leaf.grad, np.arange(3.0))
    assert const.grad is None


def test_forward_primitive_dispatch():
    tape = Tape(grad=False)
    x = tape.constant(np.array([0.5, -0.5]))
    y = ad.forward_primitive("tanh", x)
    assert np.allclose(y.value, np.tanh([0.5, -0.5]))
    with pytest.raises(ShapeMismatch):
        ad.forward_primitive("no-such-op", x)


def test_param_store_flat_round_trip():
    store = ParamStore()
    store.add("w", RNG.normal(size=(3, 2)))
    store.add("b", RNG.normal(size=2))
    store.add("s", 1.5)
    flat = store.flat()
    assert flat.shape == (store.size,) == (9,)
    vec = RNG.normal(size=9)
    store.set_flat(vec)
    assert np.allclose(store.flat(), vec)
    assert store["w"].shape == (3, 2)
    sl = store.flat_slices()
    assert np.allclose(vec[sl["b"]], store["b"])
    with pytest.raises(KeyError):
        store.add("w", np.zeros(1))
    with pytest.raises(ShapeMismatch):
        store["b"] = np.zeros(3)
    with pytest.raises(ShapeMismatch):
        store.set_flat(np.zeros(4))


def test_param_store_copy_is_independent():
    store = ParamStore()
    store.add("x", np.ones(2))
    dup = store.copy()
    dup["x"] = np.zeros(2)
    assert np.allclose(store["x"], 1.0)


def test_bind_and_grads_flat():
    store = ParamStore()
    store.add("a", np.array([1.0, 2.0]))
    store.add("b", np.array([[3.0]]))
    tape = Tape()
    leaves = ad.bind_params(tape, store)
    out = ad.reduce_sum(ad.hadamard(leaves["a"], leaves["a"]))
    tape.backward(out)
    flat = ad.grads_flat(store, leaves)
    # "b" never touched the loss; its slot is zero-filled
    assert np.allclose(flat, [2.0, 4.0, 0.0])


@given(st.floats(min_value=1e-6, max_value=50.0))
@settings(max_examples=200, deadline=None)
def test_softplus_inverse_identity(y):
    assert ad.softplus_value(ad.softplus_inverse(y)) == pytest.approx(y, rel=1e-9)


@given(st.floats(min_value=-700.0, max_value=700.0))
@settings(max_examples=200, deadline=None)
def test_sigmoid_bounded_and_finite(x):
    v = float(ad._sigmoid(np.float64(x)))
    assert 0.0 <= v <= 1.0
    assert np.isfinite(v)

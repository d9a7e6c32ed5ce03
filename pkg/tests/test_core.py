import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adacorr.core import tape as T
from adacorr.core.fft import dft_reference, fft, fftfreq_signed, ifft
from adacorr.core.gradcheck import grad_check
from adacorr.core.grid import ComplexField, GridField
from adacorr.core.nn import (circular_conv2d, dense, softmax_flat, spectral_conv1d,
                             spectral_conv1d_reference)
from adacorr.core.params import ParamStore
from adacorr.core.tape import DomainError, ShapeError, Tape


def store_with(**arrays):
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k, np.asarray(v, dtype=np.float64))
    return s


# ---------------------------------------------------------------- elementwise

def test_add_componentwise():
    t = Tape()
    out = T.elementwise("add", t.constant([1.0, 2.0]), t.constant([3.0, 4.0]))
    assert np.array_equal(out.value, [4.0, 6.0])


def test_mul_by_zero_field_has_zero_grad():
    s = store_with(x=[1.5, -2.0, 3.0])
    t = Tape()
    x = t.param(s, "x")
    out = T.elementwise("mul", x, t.constant(np.zeros(3)))
    assert np.array_equal(out.value, np.zeros(3))
    t.backward(T.reduce_sum(out), s)
    assert np.array_equal(s.grads["x"], np.zeros(3))


def test_square_backward_hand_derivative():
    s = store_with(x=[3.0, 4.0])
    t = Tape()
    sq = T.elementwise("square", t.param(s, "x"))
    assert np.array_equal(sq.value, [9.0, 16.0])
    t.backward(T.reduce_sum(sq), s)
    assert np.array_equal(s.grads["x"], [6.0, 8.0])


def test_shape_mismatch_reports_both_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as exc:
        T.add(t.constant(np.ones(3)), t.constant(np.ones(4)))
    assert "(3,)" in str(exc.value) and "(4,)" in str(exc.value)


def test_scalar_broadcast_allowed():
    t = Tape()
    out = T.mul(t.constant(np.arange(3.0)), 2.0)
    assert np.array_equal(out.value, [0.0, 2.0, 4.0])


@pytest.mark.parametrize("bad", [[1.0, 0.0], [1.0, -2.0]])
def test_sqrt_domain_error(bad):
    t = Tape()
    with pytest.raises(DomainError):
        T.sqrt(t.constant(bad))


@pytest.mark.parametrize("op", ["tanh", "gelu", "relu", "sqrt", "square", "neg"])
def test_unary_ops_gradcheck(op):
    rng = np.random.default_rng(1)
    x = rng.uniform(0.2, 2.0, size=12) * rng.choice([-1, 1], size=12)
    if op == "sqrt":
        x = np.abs(x)
    s = store_with(x=x)
    err = grad_check(lambda t, st_: T.reduce_sum(T.mul(T.elementwise(op, t.param(st_, "x")),
                                                       np.arange(1.0, 13.0))), s)
    assert err < 1e-5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_ops_gradcheck(op):
    rng = np.random.default_rng(2)
    s = store_with(a=rng.normal(size=(2, 3)), b=rng.uniform(0.5, 2.0, size=(2, 3)))
    err = grad_check(lambda t, st_: T.reduce_sum(T.square(
        T.elementwise(op, t.param(st_, "a"), t.param(st_, "b")))), s)
    assert err < 1e-5


# ----------------------------------------------------------------- reductions

def test_reduce_sum_examples():
    t = Tape()
    assert T.reduce_sum(t.constant([1.0, 2.0, 3.0])).value == 6.0
    assert T.reduce_sum(t.constant(np.zeros((4, 4)))).value == 0.0
    per_channel = T.reduce_sum(t.constant([[1.0, 2.0], [3.0, 4.0]]), axis=1)
    assert np.array_equal(per_channel.value, [3.0, 7.0])


def test_reduce_sum_gradient_is_uniform():
    s = store_with(p=np.random.default_rng(0).normal(size=(3, 5)))
    t = Tape()
    t.backward(T.reduce_sum(t.param(s, "p")), s)
    assert np.array_equal(s.grads["p"], np.ones((3, 5)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=64),
       st.randoms(use_true_random=False))
def test_reduce_sum_permutation_invariant(values, rnd):
    x = np.array(values)
    perm = list(range(len(values)))
    rnd.shuffle(perm)
    t = Tape()
    a = T.reduce_sum(t.constant(x)).value
    b = T.reduce_sum(t.constant(x[perm])).value
    scale = max(1.0, np.abs(x).sum())
    assert abs(a - b) <= 1e-12 * scale


def test_l2norm_and_mean_gradcheck():
    rng = np.random.default_rng(3)
    s = store_with(x=rng.normal(size=(3, 2, 5)))
    err = grad_check(lambda t, st_: T.mean(T.l2norm(t.param(st_, "x"))), s)
    assert err < 1e-5


def test_channel_ops_gradcheck():
    rng = np.random.default_rng(4)
    s = store_with(x=rng.normal(size=(2, 3, 4)), y=rng.normal(size=(2, 1, 4)))

    def f(t, st_):
        x = t.param(st_, "x")
        sub = T.take_channels(x, (0, 2))
        full = T.replace_channels(x, T.square(sub), (0, 2))
        cat = T.concat([full, t.param(st_, "y")], axis=1)
        return T.reduce_sum(T.tanh(T.reshape(cat, (2, 16))))
    assert grad_check(f, s) < 1e-5


# ---------------------------------------------------------------- backward

def test_backward_examples():
    s = store_with(p=[1.0, 2.0], q=[5.0])
    t = Tape()
    p = t.param(s, "p")
    t.param(s, "q")
    t.backward(T.reduce_sum(T.square(p)), s)
    assert np.array_equal(s.grads["p"], [2.0, 4.0])
    assert np.array_equal(s.grads["q"], [0.0])


def test_backward_sum_gives_ones():
    s = store_with(p=np.arange(6.0).reshape(2, 3))
    t = Tape()
    t.backward(T.reduce_sum(t.param(s, "p")), s)
    assert np.array_equal(s.grads["p"], np.ones((2, 3)))


def test_backward_rejects_non_scalar_root():
    s = store_with(p=[1.0, 2.0])
    t = Tape()
    with pytest.raises(ShapeError):
        t.backward(T.square(t.param(s, "p")), s)


def test_tape_order_parents_precede_children():
    s = store_with(p=[1.0, 2.0])
    t = Tape()
    out = T.reduce_sum(T.tanh(T.mul(t.param(s, "p"), 3.0)))
    for node in t.nodes[:out.id + 1]:
        assert all(par.id < node.id for par in node.parents)


def test_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        s = store_with(w=rng.normal(size=(4, 3)), b=rng.normal(size=4))
        x = rng.normal(size=(2, 3, 8))
        t = Tape()
        out = T.reduce_sum(T.gelu(dense(t.constant(x), t.param(s, "w"), t.param(s, "b"))))
        t.backward(out, s)
        return out.value, s.grads["w"].copy(), s.grads["b"].copy()
    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# ----------------------------------------------------------------- grad_check

def test_grad_check_quadratic_is_exact():
    s = store_with(x=np.random.default_rng(5).normal(size=7))
    err = grad_check(lambda t, st_: T.reduce_sum(T.square(t.param(st_, "x"))), s, h=1e-4)
    assert err < 1e-9


def test_grad_check_constant_function():
    s = store_with(x=[1.0, 2.0])
    assert grad_check(lambda t, st_: T.reduce_sum(t.constant(np.ones(3))), s) == 0.0


def test_grad_check_rejects_bad_step():
    s = store_with(x=[1.0])
    with pytest.raises(ValueError):
        grad_check(lambda t, st_: T.reduce_sum(t.param(st_, "x")), s, h=0.0)


# ---------------------------------------------------------------------- dense

def test_dense_identity_and_example():
    t = Tape()
    x = np.random.default_rng(0).normal(size=(2, 3, 5))
    out = dense(t.constant(x), t.constant(np.eye(3)), t.constant(np.zeros(3)))
    assert np.array_equal(out.value, x)
    out = dense(t.constant([[[3.0]]]), t.constant([[2.0]]), t.constant([1.0]))
    assert out.value.item() == 7.0


def test_dense_bias_gradient_counts_grid_points():
    s = store_with(w=np.ones((2, 1)), b=np.zeros(2))
    t = Tape()
    out = dense(t.constant(np.ones((1, 1, 6))), t.param(s, "w"), t.param(s, "b"))
    t.backward(T.reduce_sum(out), s)
    assert np.array_equal(s.grads["b"], [6.0, 6.0])


def test_dense_dimension_mismatch():
    t = Tape()
    with pytest.raises(ShapeError):
        dense(t.constant(np.ones((1, 2, 4))), t.constant(np.ones((3, 5))), t.constant(np.zeros(3)))


# --------------------------------------------------------------------- conv2d

def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    K = np.zeros((1, 1, 3, 3))
    K[0, 0, 1, 1] = 1.0
    t = Tape()
    out = circular_conv2d(t.constant(x), t.constant(K), t.constant(np.zeros(1)))
    assert np.array_equal(out.value, x)


def test_conv_constant_field():
    rng = np.random.default_rng(1)
    K = rng.normal(size=(2, 3, 3, 3))
    c = np.array([0.5, -1.0, 2.0])
    x = np.broadcast_to(c[None, :, None, None], (1, 3, 4, 4)).copy()
    t = Tape()
    out = circular_conv2d(t.constant(x), t.constant(K), t.constant(np.zeros(2)))
    expect = np.einsum("oipq,i->o", K, c)
    assert np.allclose(out.value, expect[None, :, None, None], rtol=0, atol=1e-13)


def test_conv_matches_explicit_periodic_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 4, 5))
    K = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    ref = np.zeros((1, 3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                acc = b[o]
                for c in range(2):
                    for p in range(3):
                        for q in range(3):
                            acc += K[o, c, p, q] * x[0, c, (i + p - 1) % 4, (j + q - 1) % 5]
                ref[0, o, i, j] = acc
    t = Tape()
    out = circular_conv2d(t.constant(x), t.constant(K), t.constant(b))
    assert np.allclose(out.value, ref, rtol=0, atol=1e-12)


def test_conv_gradcheck_4x4():
    rng = np.random.default_rng(3)
    s = store_with(x=rng.normal(size=(2, 2, 4, 4)), k=rng.normal(size=(3, 2, 3, 3)),
                   b=rng.normal(size=3))
    err = grad_check(lambda t, st_: T.reduce_sum(T.tanh(circular_conv2d(
        t.param(st_, "x"), t.param(st_, "k"), t.param(st_, "b")))), s)
    assert err < 1e-6


def test_conv_rejects_non_2d():
    t = Tape()
    with pytest.raises(ShapeError):
        circular_conv2d(t.constant(np.ones((1, 1, 8))), t.constant(np.ones((1, 1, 3, 3))),
                        t.constant(np.zeros(1)))


# ------------------------------------------------------------------------ fft

def test_fft_delta_and_constant():
    d = np.zeros(8)
    d[0] = 1.0
    assert np.allclose(fft(d), np.ones(8), atol=1e-15)
    c = 2.5
    assert np.allclose(fft(np.full(4, c)), [4 * c, 0, 0, 0], atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 4, 16, 128, 1024])
def test_fft_matches_direct_dft(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    ref = dft_reference(x)
    assert np.max(np.abs(fft(x) - ref)) <= 1e-11 * max(1.0, np.max(np.abs(ref)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10), st.integers(0, 2**31 - 1))
def test_fft_roundtrip(logn, seed):
    n = 2 ** logn
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
    back = ifft(fft(x))
    assert np.max(np.abs(back - x)) <= 1e-12 * max(1.0, np.max(np.abs(x)))


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        fft(np.ones(6))


def test_signed_frequencies():
    assert list(fftfreq_signed(8)) == [0, 1, 2, 3, 4, -3, -2, -1]


# ------------------------------------------------------------------- spectral

def _identity_weights(modes, c):
    W = np.zeros((modes, c, c, 2))
    for k in range(modes):
        W[k, :, :, 0] = np.eye(c)
    return W


def test_spectral_identity_on_bandlimited_input():
    n, modes = 32, 6
    x = np.arange(n) / n
    field = (1.0 + np.cos(2 * np.pi * x) - 0.5 * np.sin(2 * np.pi * 3 * x)
             + 0.25 * np.cos(2 * np.pi * 5 * x + 0.3))
    inp = np.stack([field, 2 * field])[None]
    t = Tape()
    out = spectral_conv1d(t.constant(inp), t.constant(_identity_weights(modes, 2)))
    assert np.max(np.abs(out.value - inp)) < 1e-10


def test_spectral_zero_weights():
    t = Tape()
    out = spectral_conv1d(t.constant(np.ones((1, 2, 16))), t.constant(np.zeros((4, 3, 2, 2))))
    assert np.array_equal(out.value, np.zeros((1, 3, 16)))


def test_spectral_matches_fft_route():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4, 64))
    W = rng.normal(size=(8, 5, 4, 2))
    t = Tape()
    fast = spectral_conv1d(t.constant(x), t.constant(W)).value
    slow = spectral_conv1d_reference(x, W)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_spectral_gradcheck_16_points_4_modes():
    rng = np.random.default_rng(7)
    s = store_with(x=rng.normal(size=(2, 3, 16)), w=rng.normal(size=(4, 2, 3, 2)))
    err = grad_check(lambda t, st_: T.reduce_sum(T.square(spectral_conv1d(
        t.param(st_, "x"), t.param(st_, "w")))), s)
    assert err < 1e-5


@pytest.mark.parametrize("n", [12, 8])
def test_spectral_rejects_bad_grid(n):
    t = Tape()
    with pytest.raises(ShapeError):
        spectral_conv1d(t.constant(np.ones((1, 1, n))), t.constant(np.zeros((5, 1, 1, 2))))


# -------------------------------------------------------------------- softmax

def test_softmax_uniform_and_example():
    t = Tape()
    a = softmax_flat(t.constant(np.zeros((1, 1, 10))))
    assert np.allclose(a.value, 0.1, rtol=0, atol=1e-16)
    a = softmax_flat(t.constant(np.log([[[1.0, 2.0, 3.0]]])))
    assert np.allclose(a.value, [[[1 / 6, 2 / 6, 3 / 6]]], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one_and_shift_invariant(n, shift, seed):
    z = np.random.default_rng(seed).normal(scale=5.0, size=(2, 2, n))
    t = Tape()
    a = softmax_flat(t.constant(z)).value
    b = softmax_flat(t.constant(z + shift)).value
    assert np.all(np.abs(a.reshape(2, -1).sum(axis=1) - 1.0) <= 1e-15 * 2 * n)
    assert np.max(np.abs(a - b)) <= 1e-15 * 8


def test_softmax_gradcheck():
    rng = np.random.default_rng(8)
    s = store_with(z=rng.normal(size=(2, 1, 9)))
    w = rng.normal(size=(2, 1, 9))
    err = grad_check(lambda t, st_: T.reduce_sum(T.mul(softmax_flat(t.param(st_, "z")), w)), s)
    assert err < 1e-5


# ---------------------------------------------------------------------- grids

def test_gridfield_invariants():
    g = GridField(np.zeros((2, 4, 8)))
    assert g.channels == 2 and g.dims == (4, 8)
    assert g.spacing == (0.25, 0.125)
    assert g.flat().size == 2 * 4 * 8
    with pytest.raises(ValueError):
        GridField(np.array([[np.nan, 1.0]]))


def test_complexfield_roundtrip():
    z = np.random.default_rng(0).normal(size=8) + 1j * np.random.default_rng(1).normal(size=8)
    cf = ComplexField.from_complex(z)
    assert np.array_equal(cf.to_complex(), z)
    assert np.array_equal(ComplexField.from_grid(cf.to_grid()).to_complex(), z)


def test_paramstore_contract():
    s = ParamStore()
    s.add("b", np.ones(2))
    s.add("a", np.ones((2, 2)))
    assert s.names() == ["a", "b"]
    assert all(s.grads[k].shape == s.params[k].shape for k in s.names())
    with pytest.raises(KeyError):
        s.add("a", np.ones(1))
    s.grads["a"] += 3
    s.zero_grad()
    assert not s.grads["a"].any()

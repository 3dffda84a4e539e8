import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pskd.errors import InternalError, NumericDomainError, ParameterError
from pskd.numerics import (GradTape, adam_init, backward, corrupted_backward, cross_entropy,
                           finite_diff_check, kl_div, log_softmax_temp, optimizer_step, softmax_temp)
from pskd.numerics import autodiff as ad

from oracles import ce_row, kl_row, softmax_row

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- softmax / kl / ce

def test_softmax_symmetric_logits_give_uniform():
    for T in (0.5, 1.0, 4.0, 10.0):
        np.testing.assert_allclose(softmax_temp(np.zeros((1, 2)), T), [[0.5, 0.5]])


def test_softmax_at_temperature_four():
    p = softmax_temp(np.array([[2.0, 0.0]]))
    np.testing.assert_allclose(p, [[0.6225, 0.3775]], atol=5e-5)
    e = math.exp(0.5)
    np.testing.assert_allclose(p[0, 0], e / (e + 1), rtol=1e-14)


def test_softmax_rejects_bad_temperature_and_nonfinite():
    with pytest.raises(ParameterError):
        softmax_temp(np.zeros((1, 2)), 0.0)
    with pytest.raises(NumericDomainError):
        softmax_temp(np.array([[np.nan, 0.0]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite),
       st.floats(0.25, 8))
def test_softmax_matches_oracle(z, T):
    p = softmax_temp(z, T)
    for row, prow in zip(z, p):
        np.testing.assert_allclose(prow, softmax_row(list(row), T), rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax_temp(z, T)), p, rtol=1e-9, atol=1e-300)


def test_kl_examples():
    assert kl_div(np.array([[0.3, 0.7]]), np.array([[0.3, 0.7]])) == pytest.approx(0.0, abs=1e-15)
    assert kl_div(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])) == pytest.approx(math.log(2), rel=1e-12)
    v = kl_div(np.array([[0.7, 0.3]]), np.array([[0.5, 0.5]]))
    assert v == pytest.approx(0.7 * math.log(1.4) + 0.3 * math.log(0.6), rel=1e-12)
    assert round(v, 4) == 0.0823


@given(st.integers(1, 4), st.integers(2, 5), st.data())
def test_kl_matches_oracle_and_is_nonnegative(B, C, data):
    zp = data.draw(arrays(np.float64, (B, C), elements=finite))
    zq = data.draw(arrays(np.float64, (B, C), elements=finite))
    p, q = softmax_temp(zp, 1.0), softmax_temp(zq, 1.0)
    v = kl_div(p, q)
    ref = sum(kl_row(list(a), list(b)) for a, b in zip(p, q)) / B
    assert v >= -1e-12
    assert v == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([[1.0, 0.0]]), [0]) == pytest.approx(0.0, abs=1e-15)
    assert cross_entropy(np.full((3, 4), 0.25), [0, 2, 3]) == pytest.approx(math.log(4), rel=1e-12)
    assert cross_entropy(np.array([[0.25, 0.75]]), [1]) == pytest.approx(-math.log(0.75), rel=1e-12)
    assert round(cross_entropy(np.array([[0.25, 0.75]]), [1]), 4) == 0.2877


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_checks():
    with pytest.raises(ParameterError):
        cross_entropy(np.full((2, 3), 1 / 3), [0, 3])
    with pytest.raises(ParameterError):
        cross_entropy(np.full((2, 3), 1 / 3), [0])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite), st.data())
def test_cross_entropy_matches_oracle(z, data):
    labels = data.draw(arrays(np.int64, z.shape[0], elements=st.integers(0, z.shape[1] - 1)))
    p = softmax_temp(z, 1.0)
    ref = sum(ce_row(list(r), int(y)) for r, y in zip(p, labels)) / len(labels)
    assert cross_entropy(p, labels) == pytest.approx(ref, rel=1e-12)


def test_var_in_gives_var_out():
    tape = GradTape()
    z = tape.watch("z", np.array([[1.0, 2.0]]))
    out = softmax_temp(z, 2.0)
    assert isinstance(out, ad.Var) and out.tape is tape


# ---------------------------------------------------------------- autodiff

def test_sum_gradient_is_ones():
    tape = GradTape()
    w = tape.watch("w", np.arange(6.0).reshape(2, 3))
    g = backward(tape, ad.sum_(w))
    np.testing.assert_array_equal(g["w"], np.ones((2, 3)))


def test_half_norm_gradient_is_w():
    tape = GradTape()
    w0 = np.array([1.5, -2.0, 0.25])
    w = tape.watch("w", w0)
    g = backward(tape, ad.scale(ad.sum_(ad.square(w)), 0.5))
    np.testing.assert_allclose(g["w"], w0, rtol=1e-15)


def test_backward_rejects_non_scalar():
    tape = GradTape()
    w = tape.watch("w", np.ones(3))
    with pytest.raises(ParameterError):
        backward(tape, ad.relu(w))


def test_unused_parameter_gets_zero_gradient():
    tape = GradTape()
    a = tape.watch("a", np.ones(2))
    tape.watch("b", np.ones((2, 2)))
    g = backward(tape, ad.sum_(a))
    np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))


def test_missing_backward_rule_is_internal_error():
    tape = GradTape()
    w = tape.watch("w", np.ones(2))
    loss = ad.sum_(w)
    loss.op = "no_such_op"
    with pytest.raises(InternalError):
        backward(tape, loss)


def test_every_recorded_op_has_a_rule():
    tape = GradTape()
    x = tape.watch("x", np.random.default_rng(0).normal(size=(2, 5, 3)))
    w = tape.watch("w", np.random.default_rng(1).normal(size=(4, 3, 3)))
    h = ad.mean(ad.relu(ad.conv1d(x, w)), axis=1)
    loss = ad.mean(ad.kl_rows(ad.softmax(h, 2.0), ad.softmax(ad.scale(h, 0.5))))
    loss = ad.add(loss, ad.mean(ad.log(ad.take_labels(ad.softmax(h), np.array([0, 1])))))
    for node in tape.nodes:
        assert node.op in ad.BACKWARD_RULES


def _conv1d_loop(x, w, b):
    B, T, cin = x.shape
    cout, _, K = w.shape
    pad = K // 2
    xp = np.zeros((B, T + 2 * pad, cin))
    xp[:, pad:pad + T] = x
    out = np.zeros((B, T, cout))
    for bi in range(B):
        for t in range(T):
            for o in range(cout):
                out[bi, t, o] = b[o] + sum(w[o, c, k] * xp[bi, t + k, c] for c in range(cin) for k in range(K))
    return out


def test_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 7, 3))
    w = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ad.conv1d(ad.Var(x), w, b).value, _conv1d_loop(x, w, b), rtol=1e-12)


def test_conv_relu_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 2))

    def loss(p, tape):
        h = ad.relu(ad.conv1d(ad.Var(x), p["w"], p["b"]))
        return ad.mean(ad.square(h))

    rep = finite_diff_check(loss, {"w": rng.normal(size=(3, 2, 3)), "b": rng.normal(size=3)})
    assert rep.passed, rep


# ---------------------------------------------------------------- gradient checker

@pytest.mark.parametrize("h", [1e-6, 1e-5, 1e-4])
def test_gradcheck_quadratic_passes_tight_tolerance(h):
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def loss(p, tape):
        w = p["w"]
        return ad.scale(ad.sum_(ad.mul(w, ad.matmul(ad.reshape(w, (1, 2)), A))), 0.5)

    rep = finite_diff_check(loss, {"w": np.array([0.3, -1.2])}, h=h, tol=1e-6)
    assert rep.passed and rep.max_rel_error < 1e-6


def test_gradcheck_catches_corrupted_rule():
    def loss(p, tape):
        return ad.sum_(ad.square(p["w"]))

    params = {"w": np.array([1.0, -2.0, 3.0])}
    assert finite_diff_check(loss, params).passed
    with corrupted_backward("square", 1.5):
        rep = finite_diff_check(loss, params)
    assert not rep.passed and rep.max_rel_error > 0.1
    # restored afterwards
    assert finite_diff_check(loss, params).passed


def test_corrupted_backward_unknown_op():
    with pytest.raises(ParameterError):
        with corrupted_backward("not_an_op"):
            pass


# ---------------------------------------------------------------- optimizer

def test_adam_first_step():
    p = {"w": np.array([1.0])}
    st0 = adam_init(p, lr=0.1)
    new, st1 = optimizer_step(st0, p, {"w": np.array([1.0])})
    assert new["w"][0] == pytest.approx(0.9, abs=1e-6)
    assert st1.step == 1 and st0.step == 0
    assert p["w"][0] == 1.0  # input untouched


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -3.0]), "b": np.zeros((2, 2))}
    st0 = adam_init(p)
    new, st1 = optimizer_step(st0, p, {k: np.zeros_like(v) for k, v in p.items()})
    for k in p:
        np.testing.assert_array_equal(new[k], p[k])
    assert st1.step == 1
    assert all(st1.m[k].shape == p[k].shape for k in p)


def test_adam_is_deterministic():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=(3, 2))}
    g = {"w": rng.normal(size=(3, 2))}
    s = adam_init(p)
    a, sa = optimizer_step(s, p, g)
    b, sb = optimizer_step(s, p, g)
    assert a["w"].tobytes() == b["w"].tobytes()
    assert sa.v["w"].tobytes() == sb.v["w"].tobytes()


def test_adam_refuses_nonfinite_gradient():
    p = {"w": np.ones(2)}
    s = adam_init(p)
    with pytest.raises(NumericDomainError):
        optimizer_step(s, p, {"w": np.array([1.0, np.inf])})
    with pytest.raises(ParameterError):
        optimizer_step(s, p, {"w": np.ones(3)})


@settings(max_examples=50)
@given(arrays(np.float64, 4, elements=st.floats(-100, 100)), st.floats(1e-4, 1.0))
def test_adam_first_step_size_bounded_by_lr(g, lr):
    p = {"w": np.zeros(4)}
    new, _ = optimizer_step(adam_init(p, lr=lr), p, {"w": g})
    assert np.all(np.abs(new["w"]) <= lr * (1 + 1e-9))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incseg import autodiff as ad


def test_array_rejects_non_finite():
    with pytest.raises(ValueError):
        ad.Array([1.0, np.nan])
    with pytest.raises(ValueError):
        ad.Array([np.inf])


def test_softmax_symmetry():
    out = ad.softmax(ad.Array([0.0, 0.0]), 0)
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=1e-15)


def test_softmax_values():
    # frozen from a high-precision evaluation of e^x / sum e^x
    out = ad.softmax(ad.Array([1.0, 2.0, 3.0]), 0)
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_softmax_shift_invariance():
    a = ad.softmax(ad.Array([11.0, 12.0, 13.0]), 0)
    b = ad.softmax(ad.Array([1.0, 2.0, 3.0]), 0)
    np.testing.assert_array_equal(a.data, b.data)


def test_softmax_slices_sum_to_one():
    rng = np.random.default_rng(3)
    x = ad.Array(rng.normal(size=(7, 5)) * 4)
    out = ad.softmax(x, 1)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(7), rtol=0, atol=1e-9)
    assert np.array_equal(np.argmax(out.data, axis=1), np.argmax(x.data, axis=1))


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        ad.softmax(ad.Array([1.0, 2.0]), 3)


def test_bernoulli_kl_identical_is_zero():
    assert ad.bernoulli_kl(0.8, 0.8).item() == 0.0
    assert ad.bernoulli_kl(0.5, 0.5).item() == 0.0


def test_bernoulli_kl_value():
    # frozen closed form: 0.9 ln(0.9/0.8) + 0.1 ln(0.1/0.2)
    assert ad.bernoulli_kl(0.9, 0.8).item() == pytest.approx(0.0366900140347506, abs=1e-12)


def test_bernoulli_kl_shape_mismatch():
    with pytest.raises(ValueError):
        ad.bernoulli_kl(ad.Array([0.1, 0.2]), ad.Array([0.1, 0.2, 0.3]))


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
@settings(max_examples=200, deadline=None)
def test_bernoulli_kl_nonnegative(p, q):
    v = ad.bernoulli_kl(p, q).item()
    assert v >= 0.0
    if p == q:
        assert v == 0.0


def test_cosine_self_and_orthogonal():
    v = ad.Array([3.0, -1.0, 2.0])
    assert ad.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)
    assert ad.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert ad.cosine_similarity([1.0, 2.0], [2.0, 4.0]).item() == pytest.approx(1.0, abs=1e-12)


def test_cosine_zero_vector_neutral():
    assert ad.cosine_similarity([0.0, 0.0], [1.0, 2.0]).item() == 0.0


def test_cosine_length_mismatch():
    with pytest.raises(ValueError):
        ad.cosine_similarity([1.0], [1.0, 2.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6),
       st.floats(0.1, 50.0))
@settings(max_examples=200, deadline=None)
def test_cosine_bounded_and_scale_invariant(vals, scale):
    u = np.asarray(vals)
    v = np.arange(1.0, len(vals) + 1.0)
    c = ad.cosine_similarity(u, v).item()
    assert -1.0 <= c <= 1.0
    c2 = ad.cosine_similarity(u * scale, v).item()
    assert c2 == pytest.approx(c, abs=1e-9)


def test_finite_diff_quadratic():
    x = ad.Array([3.0], requires_grad=True)
    err = ad.finite_diff_check(lambda v: (v * v).sum(), x, eps=1e-5)
    assert err < 1e-8


def test_finite_diff_constant():
    x = ad.Array([1.0, 2.0], requires_grad=True)
    err = ad.finite_diff_check(lambda v: ad.Array(4.0) * ad.Array(1.0), x)
    assert err == 0.0


def test_finite_diff_non_finite_raises():
    x = ad.Array([800.0], requires_grad=True)
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda v: ad.exp(v).sum(), x)


def _random_inputs(rng, shape):
    return ad.Array(rng.normal(size=shape), requires_grad=True)


def test_elementwise_op_gradients():
    # every differentiable op checked at random double-precision points
    rng = np.random.default_rng(12)
    c43 = ad.Array(rng.normal(size=(4, 3)))
    c4 = ad.Array(rng.normal(size=(4,)))
    c62 = ad.Array(rng.normal(size=(6, 2)))
    c34 = ad.Array(rng.normal(size=(3, 4)))
    cdiv = ad.Array(rng.normal(size=(4, 3)) + 4.0)
    cases = {
        "add": lambda v: (v + c43).sum(),
        "sub": lambda v: (c43 - v).sum(),
        "mul": lambda v: (v * v).mean(),
        "div": lambda v: (v / cdiv).sum(),
        "neg": lambda v: (-v).sum(),
        "exp": lambda v: ad.exp(v).sum(),
        "tanh": lambda v: ad.tanh(v).mean(),
        "pow": lambda v: ((v * v + 1.0) ** 1.7).sum(),
        "sum_axis": lambda v: (v.sum(axis=1) * c4).sum(),
        "mean_axis": lambda v: (v.mean(axis=0) ** 2.0).sum(),
        "reshape": lambda v: (v.reshape((6, 2)) * c62).sum(),
        "moveaxis": lambda v: (v.moveaxis(0, 1) * c34).sum(),
        "softmax": lambda v: (ad.softmax(v, 1) * c43).sum(),
        "clip": lambda v: ad.clip(v * 0.3, -0.5, 0.5).sum(),
    }
    for name, f in cases.items():
        x = _random_inputs(rng, (4, 3))
        err = ad.finite_diff_check(f, x, eps=1e-6)
        assert err < 1e-5, f"{name}: {err}"


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    x += np.sign(x) * 0.05  # keep clear of the non-differentiable point
    err = ad.finite_diff_check(lambda v: ad.relu(v).sum(), ad.Array(x), eps=1e-6)
    assert err < 1e-5


def test_log_gradient():
    rng = np.random.default_rng(6)
    x = ad.Array(rng.uniform(0.5, 2.0, size=(5,)))
    err = ad.finite_diff_check(lambda v: ad.log(v).sum(), x, eps=1e-6)
    assert err < 1e-5


def test_matmul_gradients():
    rng = np.random.default_rng(7)
    a = ad.Array(rng.normal(size=(3, 4)))
    b = ad.Array(rng.normal(size=(4, 2)))
    err_a = ad.finite_diff_check(lambda v: (ad.matmul(v, b) ** 2.0).sum(), a, eps=1e-6)
    err_b = ad.finite_diff_check(lambda v: (ad.matmul(a, v) ** 2.0).sum(), b, eps=1e-6)
    assert err_a < 1e-5 and err_b < 1e-5


def test_pad_and_take_gradients():
    rng = np.random.default_rng(8)
    x = ad.Array(rng.normal(size=(3, 3)))
    idx = np.array([[0, 4, 8], [2, 2, 6]])

    def f(v):
        padded = ad.pad_zero(v, ((1, 1), (1, 1)))
        return (ad.take_flat(padded, np.array([6, 7, 12])) ** 2.0).sum() + \
            (ad.take_flat(v, idx) * ad.Array(np.ones(idx.shape))).sum()

    assert ad.finite_diff_check(f, x, eps=1e-6) < 1e-5


def test_bernoulli_kl_gradient():
    rng = np.random.default_rng(9)
    p = ad.Array(rng.uniform(0.05, 0.95, size=(6,)))
    q = ad.Array(rng.uniform(0.05, 0.95, size=(6,)))
    err_p = ad.finite_diff_check(lambda v: ad.bernoulli_kl(v, q).sum(), p, eps=1e-6)
    err_q = ad.finite_diff_check(lambda v: ad.bernoulli_kl(p, v).sum(), q, eps=1e-6)
    assert err_p < 1e-5 and err_q < 1e-5


def test_cosine_gradient():
    rng = np.random.default_rng(10)
    u = ad.Array(rng.normal(size=(5,)) + 0.5)
    v = ad.Array(rng.normal(size=(5,)) - 0.3)
    assert ad.finite_diff_check(lambda w: ad.cosine_similarity(w, v), u, eps=1e-6) < 1e-5


def test_backward_visits_each_record_once():
    x = ad.Array([2.0], requires_grad=True)
    with ad.Tape() as t:
        y = x * x
        z = y + y  # y's gradient must accumulate from two uses
        loss = z.sum()
    t.backward(loss)
    np.testing.assert_allclose(t.grad(x), [8.0])
    assert len(t) == 3


def test_no_gradient_for_untracked_inputs():
    x = ad.Array([1.0], requires_grad=True)
    c = ad.Array([5.0])
    with ad.Tape() as t:
        loss = (x * c).sum()
    t.backward(loss)
    assert t.grad(c) is None
    np.testing.assert_allclose(t.grad(x), [5.0])


def test_no_recording_outside_tape():
    x = ad.Array([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_independent_tapes_nest():
    x = ad.Array([3.0], requires_grad=True)
    with ad.Tape() as outer:
        a = x * 2.0
        with ad.Tape() as inner:
            b = (x * 5.0).sum()
        inner.backward(b)
        loss = a.sum()
    outer.backward(loss)
    np.testing.assert_allclose(inner.grad(x), [5.0])
    np.testing.assert_allclose(outer.grad(x), [2.0])

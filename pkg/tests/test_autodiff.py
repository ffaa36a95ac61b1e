import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgat import autodiff as ad
from hgat.autodiff import SegmentIndex, Tape, Tensor
from hgat.errors import DimensionError, UsageError


def grad_of(f, x):
    x = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.backward(f(x))
    return tape.grad(x)


# ---------------------------------------------------------------- forward values


def test_matmul_examples():
    assert np.array_equal(ad.matmul(np.eye(2), [[3.0], [4.0]]).values, [[3.0], [4.0]])
    assert np.array_equal(ad.matmul(np.zeros((2, 3)), np.ones((3, 1))).values, np.zeros((2, 1)))
    # hand evaluation: [1+2, 3+4]
    assert np.array_equal(ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).values, [[3.0], [7.0]])


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.leaky_relu([-1.0, 0.0, 2.0], 0.2).values, [-0.2, 0.0, 2.0])
    assert ad.sigmoid(0.0).item() == 0.5
    assert ad.tanh(0.0).item() == 0.0
    assert ad.elementwise("leaky_relu", [-1.0], slope=0.2).values[0] == pytest.approx(-0.2)
    with pytest.raises(UsageError):
        ad.elementwise("softplus", [1.0])


def test_sigmoid_is_stable_for_large_inputs():
    v = ad.sigmoid(np.array([-800.0, 800.0])).values
    assert np.all(np.isfinite(v))
    np.testing.assert_allclose(v, [0.0, 1.0], atol=1e-300)


def test_concat_examples():
    assert np.array_equal(ad.concat([1.0, 2.0], [3.0]).values, [1.0, 2.0, 3.0])
    x = np.array([[1.0, 2.0]])
    assert np.array_equal(ad.concat(x, np.zeros((1, 0))).values, x)
    assert np.array_equal(ad.concat([[1.0], [2.0]], [[3.0], [4.0]]).values, [[1.0, 3.0], [2.0, 4.0]])
    with pytest.raises(DimensionError):
        ad.concat(np.ones((2, 1)), np.ones((3, 1)))


def test_segment_softmax_examples():
    one = SegmentIndex(np.array([0]))
    assert ad.segment_softmax([7.3], one).values[0] == 1.0
    two = SegmentIndex(np.array([0, 0]))
    np.testing.assert_array_equal(ad.segment_softmax([1.5, 1.5], two).values, [0.5, 0.5])
    # exp(ln 2) / (exp(ln 2) + exp(0)) = 2/3
    np.testing.assert_allclose(ad.segment_softmax([np.log(2.0), 0.0], two).values, [2 / 3, 1 / 3], rtol=1e-15)


def test_segment_sum_examples():
    idx = SegmentIndex(np.array([1, 1]), 3)
    out = ad.segment_sum([[1.0, 1.0], [2.0, 2.0]], idx, 3).values
    assert np.array_equal(out, [[0, 0], [3, 3], [0, 0]])
    empty = SegmentIndex(np.zeros(0, dtype=int), 3)
    assert np.array_equal(ad.segment_sum(np.zeros((0, 2)), empty, 3).values, np.zeros((3, 2)))
    single = SegmentIndex(np.array([0]), 4)
    assert np.array_equal(ad.segment_sum([[5.0]], single, 4).values, [[5.0], [0.0], [0.0], [0.0]])


def test_frobenius_mse_examples():
    assert ad.frobenius_mse([[1.0, 2.0]], [[1.0, 2.0]]).item() == 0.0
    assert ad.frobenius_mse([1.0, 1.0], [0.0, 0.0]).item() == 1.0
    assert ad.frobenius_mse([2.0], [0.0]).item() == 4.0


# ---------------------------------------------------------------- backward


def test_power_rule():
    g = grad_of(lambda x: ad.sum_all(ad.mul(x, x)), np.array([3.0]))
    assert g[0] == 6.0


def test_linear_gradient_is_column_sums():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 3))
    g = grad_of(lambda x: ad.sum_all(ad.matmul(A, x)), rng.normal(size=(3, 1)))
    np.testing.assert_allclose(g[:, 0], A.sum(axis=0), rtol=1e-14)


def test_detached_leaf_has_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_all(ad.mul(y, y)))
    assert tape.grad(x) is None
    assert np.array_equal(tape.grads_for([x])[0], np.zeros(2))


def test_shared_subexpression_accumulates():
    # f = (2x) * (2x) uses the same intermediate twice
    def f(x):
        y = ad.scale(x, 2.0)
        return ad.sum_all(ad.mul(y, y))

    assert grad_of(f, np.array([1.5]))[0] == pytest.approx(12.0)


def test_gather_rows_repeats_accumulate():
    g = grad_of(lambda x: ad.sum_all(ad.gather_rows(x, np.array([0, 0, 2]))), np.ones((3, 2)))
    assert np.array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_tape_misuse_raises():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(UsageError):
            tape.backward(loss)
        with pytest.raises(UsageError):
            ad.mul(x, x)
    with Tape() as other:
        vec = ad.concat(x, x)
        with pytest.raises(UsageError):
            other.backward(vec)
        with pytest.raises(UsageError):
            other.backward(loss)
    with pytest.raises(UsageError):
        Tape().grad(x)


def test_no_tape_means_no_recording():
    x = Tensor([2.0], requires_grad=True)
    out = ad.mul(x, x)
    assert out._tape is None and out.values[0] == 4.0


def test_independent_tapes_on_threads():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    results = {}

    def work(k):
        with Tape() as tape:
            tape.backward(ad.sum_all(ad.scale(ad.mul(w, w), float(k))))
        results[k] = tape.grad(w)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        np.testing.assert_array_equal(g, 2.0 * k * w.values)


# ---------------------------------------------------------------- the oracle itself


def test_fd_check_on_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    f = lambda x: ad.sum_all(ad.mul(x, ad.matmul(x, A)))  # noqa: E731
    err = ad.finite_difference_check(f, Tensor(np.array([[0.3, -1.2], [0.7, 0.1]])), eps=1e-5)
    assert err < 1e-7


def test_fd_check_constant_function():
    assert ad.finite_difference_check(lambda x: Tensor(3.0), Tensor(np.ones(3))) == 0.0


def test_fd_check_sigmoid_composition():
    f = lambda x: ad.sum_all(ad.sigmoid(ad.mul(ad.sigmoid(x), x)))  # noqa: E731
    assert ad.finite_difference_check(f, Tensor(np.linspace(-2, 2, 7))) < 1e-4


def test_fd_check_detects_wrong_gradient():
    def bad(x):
        return ad._emit(np.asarray(np.sum(x.values ** 2)), (x,), lambda g: (np.zeros_like(x.values),))

    assert ad.finite_difference_check(bad, Tensor(np.array([1.0, 2.0]))) > 0.5


def test_fd_check_rejects_bad_eps():
    with pytest.raises(UsageError):
        ad.finite_difference_check(lambda x: ad.sum_all(x), Tensor(np.ones(2)), eps=0.0)


# ---------------------------------------------------------------- properties

segment_logits = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(-50, 50)),
        arrays(np.int64, n, elements=st.integers(0, 4)),
        st.floats(-100, 100),
    )
)


@settings(max_examples=200, deadline=None)
@given(segment_logits)
def test_segment_softmax_sums_to_one_and_is_shift_invariant(case):
    logits, targets, shift = case
    idx = SegmentIndex(targets, 5)
    a = ad.segment_softmax(logits, idx).values
    sums = np.bincount(targets, weights=a, minlength=5)
    present = np.bincount(targets, minlength=5) > 0
    np.testing.assert_allclose(sums[present], 1.0, atol=1e-12)
    shifted = ad.segment_softmax(logits + shift, idx).values
    np.testing.assert_allclose(shifted, a, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_add_sub_mul_are_consistent(a, b):
    np.testing.assert_allclose(ad.sub(ad.add(a, b), b).values, a, atol=1e-12)
    np.testing.assert_array_equal(ad.mul(a, b).values, ad.mul(b, a).values)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_gradients_of_random_compositions(x):
    def f(t):
        return ad.sum_all(ad.tanh(ad.add_bias(ad.matmul(t, np.ones((3, 2))), np.array([0.1, -0.2]))))

    assert ad.finite_difference_check(f, Tensor(x)) < 1e-4


def test_binary_broadcasting_is_refused():
    with pytest.raises(DimensionError):
        ad.add(np.ones((2, 3)), np.ones(3))

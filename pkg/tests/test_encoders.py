import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgat import autodiff as ad
from hgat.autodiff import Tensor
from hgat.encoders import (
    GRUParams,
    append_covariates,
    encode_node_window,
    gru_sequence,
    gru_step,
    pad_columns,
    run_gru,
)
from hgat.errors import DimensionError
from hgat.graph import NodeType


def test_zero_params_halve_the_state():
    p = GRUParams.zeros(3, 2)
    v = np.array([[0.8, -1.4]])
    out = gru_step(p, np.array([[5.0, -2.0, 1.0]]), v).values
    np.testing.assert_array_equal(out, 0.5 * v)


def test_zero_everything_stays_zero():
    rng = np.random.default_rng(0)
    p = GRUParams.init(2, 3, rng)
    p.b = Tensor(np.zeros(9))
    assert np.array_equal(gru_step(p, np.zeros((1, 2)), np.zeros((1, 3))).values, np.zeros((1, 3)))


def test_scalar_gru_matches_hand_evaluation():
    wz, wr, wc = 0.7, -0.4, 1.3
    uz, ur, uc = 0.2, 0.9, -0.6
    bz, br, bc = 0.1, -0.3, 0.05
    x, h = 0.8, -0.5
    p = GRUParams(Tensor([[wz, wr, wc]]), Tensor([[uz, ur, uc]]), Tensor([bz, br, bc]))
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))  # noqa: E731
    z = sig(wz * x + uz * h + bz)
    r = sig(wr * x + ur * h + br)
    c = math.tanh(wc * x + uc * (r * h) + bc)
    expected = (1 - z) * h + z * c
    assert gru_step(p, [[x]], [[h]]).values[0, 0] == pytest.approx(expected, rel=1e-14)


def test_sequence_equals_composed_steps():
    rng = np.random.default_rng(4)
    p = GRUParams.init(3, 5, rng)
    X = rng.normal(size=(6, 4, 3))
    h = np.zeros((4, 5))
    for t in range(6):
        h = gru_step(p, X[t], h).values
    np.testing.assert_allclose(run_gru(p, X).values, h, rtol=0, atol=1e-14)


def test_window_of_one_is_one_step_from_zero():
    rng = np.random.default_rng(5)
    p = GRUParams.init(2, 3, rng)
    x = rng.normal(size=(1, 2))
    np.testing.assert_allclose(
        run_gru(p, x[None]).values, gru_step(p, x, np.zeros((1, 3))).values, rtol=0, atol=1e-15
    )


def test_identical_windows_give_identical_embeddings():
    rng = np.random.default_rng(6)
    bank = {NodeType.ELEC: GRUParams.init(3, 4, rng)}
    w = rng.normal(size=(5, 3))
    a = encode_node_window(bank, "elec", w).values
    assert np.array_equal(a, encode_node_window(bank, NodeType.ELEC, w.copy()).values)


def test_types_use_separate_banks():
    rng = np.random.default_rng(7)
    bank = {NodeType.ELEC: GRUParams.init(3, 4, rng), NodeType.HYDRO: GRUParams.init(3, 4, rng)}
    w = rng.normal(size=(5, 3))
    assert not np.allclose(encode_node_window(bank, "elec", w).values,
                           encode_node_window(bank, "hydro", w).values)


def test_encoder_rejects_wrong_width():
    bank = {NodeType.ELEC: GRUParams.zeros(3, 2)}
    with pytest.raises(DimensionError):
        encode_node_window(bank, "elec", np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        GRUParams(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 6))), Tensor(np.zeros(6)))


def test_covariate_widths():
    h = Tensor(np.ones((3, 8)))
    K = 2
    out = append_covariates(h, np.zeros((3, K + 4)))
    assert out.shape == (3, 8 + K + 4)
    assert append_covariates(h, np.zeros((3, 0))) is h  # hydro pass-through
    np.testing.assert_array_equal(pad_columns(np.ones((2, 2)), 3), [[1, 1, 0], [1, 1, 0]])
    with pytest.raises(DimensionError):
        pad_columns(np.ones((2, 3)), 2)


def test_sequence_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(4, 3, 2))
    Wx, Wh, b = (rng.normal(size=s) * 0.5 for s in ((2, 9), (3, 9), (9,)))
    w = rng.uniform(0.5, 1.5, (3, 3))
    for pos in range(4):
        args = [X, Wx, Wh, b]

        def f(t, pos=pos):
            a = list(args)
            a[pos] = t
            return ad.sum_all(ad.mul(gru_sequence(*a), w))

        assert ad.finite_difference_check(f, Tensor(args[pos]), eps=1e-6) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_hidden_state_is_bounded(w, n, d, seed):
    rng = np.random.default_rng(seed)
    p = GRUParams.init(n, d, rng)
    out = run_gru(p, 100.0 * rng.normal(size=(w, 2, n))).values
    # convex mix of tanh outputs starting from zero
    assert np.all(np.abs(out) <= 1.0)

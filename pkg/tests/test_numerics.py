import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from solar.exceptions import DegenerateInputError, FixtureError, NumericalAbort
from solar.numerics import (
    Parameter, Tensor, concat, grad_check, layer_norm, no_grad, pairwise_cosine, pearson_corr,
    read_solt, solt_bytes, solt_from_bytes, stack, write_solt,
)


def test_pairwise_cosine_examples():
    np.testing.assert_allclose(pairwise_cosine([[1, 0]], [[1, 0]]), [[1.0]])
    np.testing.assert_allclose(pairwise_cosine([[1, 0]], [[0, 1]]), [[0.0]], atol=1e-15)
    out = pairwise_cosine([[1, 1]], [[1, 0], [0, -1]])
    np.testing.assert_allclose(out, [[1 / math.sqrt(2), -1 / math.sqrt(2)]], rtol=1e-12)


def test_pairwise_cosine_zero_row():
    with pytest.raises(DegenerateInputError):
        pairwise_cosine([[0, 0]], [[1, 0]])


def test_pearson_examples():
    assert pearson_corr([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson_corr([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson_corr([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(0.8)
    with pytest.raises(DegenerateInputError):
        pearson_corr([1, 1, 1], [1, 2, 3])


def test_grad_check_square():
    x = Parameter(np.array(3.0))
    err = grad_check(lambda: x * x, [x])
    assert err < 1e-6
    x.zero_grad()
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_grad_check_rejects_bad_step():
    x = Parameter(np.array(1.0))
    with pytest.raises(ValueError):
        grad_check(lambda: x * x, [x], h=1e-2)


def test_grad_check_non_finite():
    x = Parameter(np.array(-1.0))
    with pytest.raises(NumericalAbort):
        grad_check(lambda: x.log(), [x])


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: (a * b + a / (b * b + 1.0)).sum(),
        lambda a, b: (a @ b.T).tanh().sum(),
        lambda a, b: (a - b).exp().mean(),
        lambda a, b: a.softmax(-1).log().sum() + b.logsumexp(-1).sum(),
        lambda a, b: a.normalize(-1).sum() * b.relu().sum(),
        lambda a, b: (a.gelu() * b.sqrt()).sum(),
        lambda a, b: concat([a, b], 0).reshape(2, -1).transpose(1, 0)[3:, :].sum(),
        lambda a, b: stack([a, b], 1).swapaxes(0, 2).mean(axis=1).sum(),
        lambda a, b: (a[np.array([0, 0, 2])] * 2.0).sum() + (b ** 2.0).sum(),
    ],
)
def test_op_gradients(fn):
    rng = np.random.default_rng(0)
    a = Parameter(rng.standard_normal((3, 4)))
    b = Parameter(rng.random((3, 4)) + 0.5)
    assert grad_check(lambda: fn(a, b), [a, b]) < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    x = Parameter(rng.standard_normal((2, 3, 5)))
    g = Parameter(rng.random(5) + 0.5)
    b = Parameter(rng.standard_normal(5))
    w = rng.standard_normal((2, 3, 5))
    assert grad_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-6


def test_broadcast_gradient_is_reduced():
    x = Parameter(np.ones(3))
    y = Tensor(np.ones((4, 3)))
    (x * y).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 4.0))


def test_no_grad_builds_no_graph():
    x = Parameter(np.ones(2))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_solt_round_trip(tmp_path):
    a = np.arange(24, dtype=float).reshape(2, 3, 4) / 7
    write_solt(tmp_path / "a.solt", a)
    np.testing.assert_array_equal(read_solt(tmp_path / "a.solt"), a)


def test_solt_layout():
    buf = solt_bytes(np.array([[1.0, 2.0]]))
    assert buf[:4] == b"SOLT"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert len(buf) == 8 + 16 + 16


def test_solt_errors(tmp_path):
    with pytest.raises(FixtureError, match="missing"):
        read_solt(tmp_path / "none.solt")
    with pytest.raises(FixtureError, match="magic"):
        solt_from_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(FixtureError):
        solt_from_bytes(solt_bytes(np.ones(3))[:-8])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_solt_round_trip_property(a):
    b = solt_from_bytes(solt_bytes(a))
    assert b.shape == a.shape
    np.testing.assert_array_equal(b, a)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-10, 10)).filter(
    lambda m: (np.linalg.norm(m, axis=1) > 1e-3).all()))
def test_cosine_bounds_property(m):
    s = pairwise_cosine(m, m)
    assert np.all(np.abs(s) <= 1.0)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)
    np.testing.assert_allclose(s, s.T, atol=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidattn.numeric import (
    ShapeError,
    check_mask,
    depthwise_conv1d,
    depthwise_conv1d_backward,
    gaussian_matrix,
    make_rng,
    masked_mean_std,
    masked_row_softmax,
    matmul,
    prefix_mask,
    subseed_rng,
)

from oracles import naive_softmax, sliding_window_conv, triple_loop_matmul


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_checked():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = np.random.default_rng(2)
    a, b, c = rng.standard_normal((6, 5)), rng.standard_normal((5, 7)), rng.standard_normal((7, 4))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(left)


def test_matmul_bit_reproducible():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((40, 30)), rng.standard_normal((30, 20))
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


def test_softmax_analytic():
    out = masked_row_softmax([[0.0, 0.0], [math.log(2), 0.0]])
    np.testing.assert_allclose(out, [[0.5, 0.5], [2 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_softmax_single_valid_column():
    out = masked_row_softmax([[3.0, -7.0], [0.1, 100.0]], mask=[1, 0])
    np.testing.assert_array_equal(out, [[1.0, 0.0], [1.0, 0.0]])


def test_softmax_matches_naive_oracle():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((4, 6))
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
    expected = [naive_softmax(row, mask) for row in m.tolist()]
    np.testing.assert_allclose(masked_row_softmax(m, mask), expected, rtol=0, atol=1e-12)


def test_softmax_all_masked_rejected():
    with pytest.raises(ValueError):
        masked_row_softmax(np.zeros((2, 3)), mask=[0, 0, 0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)),
       st.lists(st.booleans(), min_size=5, max_size=5).filter(any))
def test_softmax_rows_sum_to_one(m, mask):
    mask = np.array(mask)
    out = masked_row_softmax(m, mask)
    np.testing.assert_allclose(out[:, mask].sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(out[:, ~mask] == 0.0)


def test_mean_std_zero_variance():
    m = np.full((5, 3), 2.5)
    mu, sd = masked_mean_std(m, prefix_mask(3, 5), epsilon=1e-8)
    np.testing.assert_array_equal(mu, 2.5)
    np.testing.assert_allclose(sd, math.sqrt(1e-8), rtol=1e-15)


def test_mean_std_two_points():
    mu, sd = masked_mean_std([[1.0], [3.0]], epsilon=1e-8)
    assert mu[0] == 2.0
    assert sd[0] == pytest.approx(math.sqrt(1 + 1e-8), rel=1e-15)


def test_mean_std_truncation_oracle():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((10, 4))
    mu, sd = masked_mean_std(m, prefix_mask(7, 10), epsilon=1e-8)
    kept = m[:7]
    np.testing.assert_allclose(mu, kept.mean(axis=0), rtol=0, atol=1e-14)
    np.testing.assert_allclose(sd, np.sqrt(kept.var(axis=0) + 1e-8), rtol=0, atol=1e-14)


def test_masked_ops_ignore_padding_values():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((6, 3))
    mask = prefix_mask(4, 6)
    garbage = m.copy()
    garbage[4:] = rng.uniform(-1e6, 1e6, size=(2, 3))
    for a, b in zip(masked_mean_std(m, mask), masked_mean_std(garbage, mask)):
        np.testing.assert_array_equal(a, b)
    kernel = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(depthwise_conv1d(m, kernel, mask), depthwise_conv1d(garbage, kernel, mask))
    sq = rng.standard_normal((2, 6))
    sq2 = sq.copy()
    sq2[:, 4:] = 1e6
    np.testing.assert_array_equal(masked_row_softmax(sq, mask), masked_row_softmax(sq2, mask))


def test_gaussian_determinism_and_moments():
    a = gaussian_matrix(make_rng(11), 100, 100)
    b = gaussian_matrix(make_rng(11), 100, 100)
    assert a.tobytes() == b.tobytes()
    assert abs(a.mean()) < 0.05
    assert abs(a.var() - 1) < 0.05
    assert not np.array_equal(a, gaussian_matrix(make_rng(12), 100, 100))


def test_gaussian_stream_is_pinned():
    # PCG64 + standard_normal is stable across platforms; pin the first draws
    first = gaussian_matrix(make_rng(0), 1, 3)[0]
    np.testing.assert_array_equal(first, np.random.Generator(np.random.PCG64(0)).standard_normal(3))


def test_subseeds_are_independent_and_stable():
    a = subseed_rng(3, "init").standard_normal(4)
    assert np.array_equal(a, subseed_rng(3, "init").standard_normal(4))
    assert not np.array_equal(a, subseed_rng(3, "dropout").standard_normal(4))


def test_conv_identity_tap():
    rng = np.random.default_rng(7)
    v = rng.standard_normal((6, 2))
    mask = prefix_mask(4, 6)
    kernel = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    expected = v.copy()
    expected[4:] = 0
    np.testing.assert_array_equal(depthwise_conv1d(v, kernel, mask), expected)


def test_conv_constant_interior():
    out = depthwise_conv1d(np.full((5, 1), 2.0), np.ones((3, 1)))
    assert out[2, 0] == 6.0
    assert out[0, 0] == 4.0


def test_conv_matches_sliding_window():
    rng = np.random.default_rng(8)
    v, k = rng.standard_normal((8, 3)), rng.standard_normal((3, 3))
    np.testing.assert_allclose(depthwise_conv1d(v, k), sliding_window_conv(v.tolist(), k.tolist()),
                               rtol=0, atol=1e-12)


def test_conv_even_width_rejected():
    with pytest.raises(ValueError):
        depthwise_conv1d(np.ones((4, 2)), np.ones((2, 2)))


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    v, k = rng.standard_normal((7, 2)), rng.standard_normal((5, 2))
    mask = prefix_mask(5, 7)
    w = rng.standard_normal((7, 2))
    gv, gk = depthwise_conv1d_backward(w, v, k, mask)
    h = 1e-6
    for arr, grad in ((v, gv), (k, gk)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = np.sum(w * depthwise_conv1d(v, k, mask))
            arr[idx] = old - h
            down = np.sum(w * depthwise_conv1d(v, k, mask))
            arr[idx] = old
            num[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad, num, atol=1e-8)


def test_check_mask_rules():
    assert check_mask(None, 3).all()
    with pytest.raises(ValueError):
        check_mask([0, 0, 0], 3)
    with pytest.raises(ValueError):
        check_mask([1, 0, 1], 3)
    with pytest.raises(ShapeError):
        check_mask([1, 1], 3)

"""Every primitive op is checked against central finite differences."""

from __future__ import annotations

import numpy as np
import pytest

import liftfield.autodiff as ad
from .oracles import fd_grad, grad_rel_error

TOL = 1e-6


def check_op(build, x0: np.ndarray, tol: float = TOL) -> None:
    """FD-check a scalar-valued graph builder against its backward pass."""
    x0 = np.asarray(x0, dtype=np.float64)

    def scalar(flat: np.ndarray) -> float:
        v = ad.leaf(flat.reshape(x0.shape))
        return float(build(v).value)

    v = ad.leaf(x0.copy())
    root = build(v)
    grads = ad.backward(root, wanted=[v])
    assert grad_rel_error(grads[v].ravel(), fd_grad(scalar, x0.ravel())) < tol


def rnd(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def test_add_sub_mul_div_neg():
    b = rnd((4, 3), 1)
    check_op(lambda v: ad.vsum(ad.add(v, ad.const(b))), rnd((4, 3), 0))
    check_op(lambda v: ad.vsum(ad.sub(ad.const(b), v)), rnd((4, 3), 2))
    check_op(lambda v: ad.vsum(ad.mul(v, ad.const(b))), rnd((4, 3), 3))
    check_op(lambda v: ad.vsum(ad.div(v, ad.const(b + 3.0))), rnd((4, 3), 4))
    check_op(lambda v: ad.vsum(ad.neg(v)), rnd((4, 3), 5))


def test_mul_broadcasting_unbroadcasts_gradient():
    col = ad.leaf(rnd((4, 1), 6))
    full = ad.leaf(rnd((4, 3), 7))
    root = ad.vsum(ad.mul(col, full))
    grads = ad.backward(root, wanted=[col, full])
    assert grads[col].shape == (4, 1)
    np.testing.assert_allclose(grads[col], full.value.sum(axis=1, keepdims=True))


def test_elementwise_nonlinearities():
    x = rnd((5, 2), 8, -2.0, 2.0)
    check_op(lambda v: ad.vsum(ad.square(v)), x)
    check_op(lambda v: ad.vsum(ad.vexp(v)), x)
    check_op(lambda v: ad.vsum(ad.vlog(v)), rnd((5, 2), 9, 0.5, 3.0))
    check_op(lambda v: ad.vsum(ad.softplus(v)), x)
    check_op(lambda v: ad.vsum(ad.sigmoid(v)), x)
    check_op(lambda v: ad.vsum(ad.one_minus_exp_neg(v)), rnd((5, 2), 10, 0.1, 2.0))


def test_relu_and_clips_away_from_kinks():
    x = rnd((6,), 11, -2.0, 2.0)
    x[np.abs(x) < 0.05] = 0.5
    check_op(lambda v: ad.vsum(ad.relu(v)), x)
    check_op(lambda v: ad.vsum(ad.maximum_const(v, 0.3)), x)
    check_op(lambda v: ad.vsum(ad.clip_min(v, -0.4)), x)


def test_reductions_and_shaping():
    x = rnd((3, 4), 12)
    check_op(lambda v: ad.vsum(v), x)
    check_op(lambda v: ad.vmean(v), x)
    check_op(lambda v: ad.vsum(ad.vmean(v, axis=0)), x)
    check_op(lambda v: ad.vsum(ad.sqsum(v, axis=1)), x)
    check_op(lambda v: ad.vsum(ad.reshape(v, (4, 3))), x)
    check_op(lambda v: ad.vsum(ad.narrow(v, (slice(1, 3), slice(0, 2)))), x)


def test_concat_routes_gradients_to_both_parts():
    a = ad.leaf(rnd((2, 3), 13))
    b = ad.leaf(rnd((2, 2), 14))
    root = ad.vsum(ad.square(ad.concat([a, b], axis=1)))
    grads = ad.backward(root, wanted=[a, b])
    np.testing.assert_allclose(grads[a], 2.0 * a.value)
    np.testing.assert_allclose(grads[b], 2.0 * b.value)


def test_cumsum_matches_fd():
    check_op(lambda v: ad.vsum(ad.square(ad.cumsum(v, axis=1))), rnd((3, 5), 15))


def test_gather_rows_and_take_along():
    idx = np.array([2, 0, 2])
    check_op(lambda v: ad.vsum(ad.square(ad.gather_rows(v, idx))), rnd((4, 3), 16))
    along = np.array([[1], [0], [2]])
    check_op(lambda v: ad.vsum(ad.take_along(v, along)), rnd((3, 3), 17))


def test_gather_rows_accumulates_repeated_rows():
    v = ad.leaf(np.ones((3, 2)))
    root = ad.vsum(ad.gather_rows(v, np.array([1, 1, 1])))
    grads = ad.backward(root, wanted=[v])
    np.testing.assert_array_equal(grads[v], [[0, 0], [3, 3], [0, 0]])


def test_linear_and_matmul():
    x = rnd((4, 3), 18)
    w0 = rnd((3, 2), 19)
    b0 = rnd((2,), 20)
    check_op(lambda v: ad.vsum(ad.square(ad.linear(ad.const(x), v, ad.const(b0)))), w0)
    check_op(lambda v: ad.vsum(ad.square(ad.linear(ad.const(x), ad.const(w0), v))), b0)
    check_op(lambda v: ad.vsum(ad.square(ad.linear(v, ad.const(w0), ad.const(b0)))), x)
    check_op(lambda v: ad.vsum(ad.square(ad.matmul(v, ad.const(w0)))), x)


def test_pairwise_sqdist_value_and_grad():
    a = rnd((4, 3), 21)
    b = rnd((5, 3), 22)
    want = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    got = ad.pairwise_sqdist(ad.const(a), ad.const(b)).value
    np.testing.assert_allclose(got, want, atol=1e-12)
    check_op(lambda v: ad.vsum(ad.pairwise_sqdist(v, ad.const(b))), a)
    check_op(lambda v: ad.vsum(ad.pairwise_sqdist(ad.const(a), v)), b)


def test_logsumexp_plain_and_masked():
    x = rnd((4, 6), 23, -3.0, 3.0)
    np.testing.assert_allclose(
        ad.logsumexp(ad.const(x)).value,
        np.log(np.exp(x).sum(axis=-1)),
        rtol=1e-12,
    )
    check_op(lambda v: ad.vsum(ad.logsumexp(v)), x)
    mask = np.random.default_rng(24).random((4, 6)) < 0.6
    mask[:, 0] = True  # keep every row non-empty
    ref = np.log(np.where(mask, np.exp(x), 0.0).sum(axis=-1))
    np.testing.assert_allclose(ad.logsumexp(ad.const(x), mask=mask).value, ref, rtol=1e-12)
    check_op(lambda v: ad.vsum(ad.logsumexp(v, mask=mask)), x)


def test_logsumexp_is_overflow_safe():
    big = np.array([[1000.0, 1000.0]])
    out = ad.logsumexp(ad.const(big)).value
    np.testing.assert_allclose(out, 1000.0 + np.log(2.0))


def test_softmax_rows_sum_to_one_and_grad():
    x = rnd((3, 4), 25, -2.0, 2.0)
    probs = ad.softmax(ad.const(x)).value
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-12)
    check_op(lambda v: ad.vsum(ad.square(ad.softmax(v))), x)


def test_render_combine_matches_einsum():
    w = rnd((3, 5), 26, 0.0, 1.0)
    f = rnd((3, 5, 2), 27)
    got = ad.render_combine(ad.const(w), ad.const(f)).value
    np.testing.assert_allclose(got, np.einsum("bs,bsc->bc", w, f), atol=1e-12)
    check_op(lambda v: ad.vsum(ad.square(ad.render_combine(v, ad.const(f)))), w)
    check_op(lambda v: ad.vsum(ad.square(ad.render_combine(ad.const(w), v))), f)


def test_trilerp_grad_and_outside_mask():
    grid = rnd((3, 3, 3), 28)
    coords = np.random.default_rng(29).uniform(0.1, 1.9, size=(7, 3))
    inside = np.ones(7, dtype=bool)
    inside[5] = False
    out = ad.trilerp(ad.const(grid), coords, inside).value
    assert out[5] == 0.0
    check_op(lambda v: ad.vsum(ad.square(ad.trilerp(v, coords, inside))), grid)


def test_trilerp_hits_grid_nodes_exactly():
    grid = rnd((3, 3, 3, 2), 30)
    coords = np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 2.0], [1.0, 0.0, 2.0]])
    out = ad.trilerp(ad.const(grid), coords, np.ones(3, dtype=bool)).value
    np.testing.assert_array_equal(out[0], grid[0, 0, 0])
    np.testing.assert_array_equal(out[1], grid[2, 2, 2])
    np.testing.assert_array_equal(out[2], grid[1, 0, 2])


def test_stop_blocks_gradient_exactly():
    v = ad.leaf(rnd((3,), 31))
    root = ad.vsum(ad.mul(ad.stop(ad.square(v)), v))
    grads = ad.backward(root, wanted=[v])
    np.testing.assert_allclose(grads[v], v.value**2)  # only the live factor


def test_backward_requires_scalar_root():
    v = ad.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.square(v))


def test_backward_reports_zero_for_unused_leaf():
    used = ad.leaf(np.ones(2))
    unused = ad.leaf(np.ones(2))
    grads = ad.backward(ad.vsum(used), wanted=[used, unused])
    np.testing.assert_array_equal(grads[unused], np.zeros(2))


def test_backward_accumulates_shared_subgraphs():
    v = ad.leaf(np.array([3.0]))
    s = ad.square(v)
    root = ad.vsum(ad.add(s, s))
    grads = ad.backward(root, wanted=[v])
    np.testing.assert_allclose(grads[v], [12.0])  # 2 * 2x


def test_operator_sugar_lifts_constants():
    v = ad.leaf(np.array([2.0]))
    root = ad.vsum((1.0 + v) * 3.0 - v / 2.0)
    assert float(root.value) == pytest.approx(8.0)
    grads = ad.backward(root, wanted=[v])
    np.testing.assert_allclose(grads[v], [2.5])

"""Hand-derived values, finite differences, and invariances for every loss."""

from __future__ import annotations

import math

import numpy as np
import pytest

import liftfield.autodiff as ad
from liftfield.losses import (
    LossValue,
    ae_loss,
    concentration_loss,
    concentration_loss_fast,
    contrastive_loss,
    grad_relative_variance,
    linear_assignment_loss,
    margin_loss,
    photometric_loss,
    rbf_similarity,
    semantic_loss,
    slowfast_loss,
)

from .oracles import fd_grad, grad_rel_error

FD_TOL = 1e-6


def emb(rows) -> ad.Var:
    return ad.leaf(np.asarray(rows, dtype=np.float64))


def fd_check(build, x0: np.ndarray, tol: float = FD_TOL) -> None:
    """FD-check d(loss)/d(embeddings) for a LossValue-producing builder."""
    x0 = np.asarray(x0, dtype=np.float64)

    def scalar(flat):
        return build(ad.leaf(flat.reshape(x0.shape))).value

    v = ad.leaf(x0.copy())
    grads = ad.backward(build(v).var, wanted=[v])
    assert grad_rel_error(grads[v].ravel(), fd_grad(scalar, x0.ravel())) < tol


def test_rbf_similarity_values():
    assert rbf_similarity([0.0, 0.0], [0.0, 0.0], 1.0) == 1.0
    assert rbf_similarity([1.0, 0.0], [0.0, 0.0], 2.0) == pytest.approx(math.exp(-2.0))


def test_photometric_hand_case_and_fd():
    rendered = emb([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    target = np.zeros((2, 3))
    assert photometric_loss(rendered, target).value == pytest.approx(0.5)
    wide = np.random.default_rng(0).normal(size=(4, 3))
    fd_check(lambda v: photometric_loss(v, np.zeros((4, 3))), wide)


def test_contrastive_two_coincident_points_give_log2():
    """Same spot, different labels: the positive mass is exactly half of e."""
    e = emb([[0.0, 0.0], [0.0, 0.0]])
    out = contrastive_loss(e, np.array([0, 1]))
    assert out.value == pytest.approx(math.log(2.0), abs=1e-15)
    assert out.skipped_fraction == 0.0


def test_contrastive_single_segment_is_zero():
    e = emb([[0.3, 0.1], [0.2, -0.4], [0.0, 0.9]])
    out = contrastive_loss(e, np.array([7, 7, 7]))
    assert out.value == pytest.approx(0.0, abs=1e-15)


def test_contrastive_fd_and_more_separation_means_less_loss():
    rng = np.random.default_rng(1)
    labels = np.array([0, 0, 1, 1, 2])
    fd_check(lambda v: contrastive_loss(v, labels, gamma=0.7), rng.normal(size=(5, 3)))
    base = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.1, 0.0]])
    near = contrastive_loss(emb(base), np.array([0, 0, 1, 1])).value
    far = contrastive_loss(emb(base * np.array([4.0, 1.0])), np.array([0, 0, 1, 1])).value
    assert far < near


def test_contrastive_rejects_mixed_images():
    e = emb([[0.0], [1.0]])
    with pytest.raises(ValueError, match="single image"):
        contrastive_loss(e, np.array([0, 1]), image_ids=np.array([0, 1]))


def test_contrastive_stays_finite_at_extreme_scales():
    rng = np.random.default_rng(2)
    e = emb(rng.normal(size=(8, 3)) * 1e3)
    out = contrastive_loss(e, rng.integers(0, 3, size=8), gamma=1e2)
    assert math.isfinite(out.value)


def test_slowfast_hand_case():
    fast = emb([[0.0]])
    slow = emb([[0.0], [0.0]])
    out = slowfast_loss(fast, np.array([5]), slow, np.array([5, 7]))
    assert out.value == pytest.approx(math.log(2.0), abs=1e-15)


def test_slowfast_skips_anchors_missing_from_slow_half():
    fast = emb([[0.0], [1.0]])
    slow = emb([[0.0], [0.2]])
    out = slowfast_loss(fast, np.array([1, 2]), slow, np.array([1, 1]))
    assert out.skipped_fraction == pytest.approx(0.5)
    all_missing = slowfast_loss(fast, np.array([8, 9]), slow, np.array([1, 1]))
    assert all_missing.skipped_fraction == 1.0
    assert all_missing.value == 0.0


def test_slowfast_slow_side_carries_no_gradient():
    rng = np.random.default_rng(3)
    fast = ad.leaf(rng.normal(size=(6, 2)))
    slow = ad.leaf(rng.normal(size=(6, 2)))
    labels = rng.integers(0, 2, size=6)
    out = slowfast_loss(fast, labels, slow, labels)
    grads = ad.backward(out.var, wanted=[fast, slow])
    np.testing.assert_array_equal(grads[slow], np.zeros((6, 2)))
    assert np.abs(grads[fast]).max() > 0


def test_slowfast_fd_over_fast_half():
    rng = np.random.default_rng(4)
    slow_vals = rng.normal(size=(7, 3))
    fl = rng.integers(0, 3, size=5)
    sl = np.array([0, 0, 1, 1, 2, 2, 2])
    fd_check(
        lambda v: slowfast_loss(v, fl, ad.leaf(slow_vals.copy()), sl, gamma=1.3),
        rng.normal(size=(5, 3)),
    )


def test_concentration_hand_case():
    slow = emb([[0.0], [2.0]])
    fast = emb([[0.0], [4.0]])
    out = concentration_loss(fast, np.array([3, 3]), slow, np.array([3, 3]))
    assert out.value == pytest.approx(5.0)  # distances 1 and 9 to centroid 1


def test_concentration_skips_and_fd():
    rng = np.random.default_rng(5)
    slow = ad.leaf(rng.normal(size=(6, 2)))
    out = concentration_loss(emb([[0.0, 0.0]]), np.array([42]), slow, np.zeros(6, dtype=int))
    assert out.skipped_fraction == 1.0
    sl = np.array([0, 0, 1, 1, 1, 2])
    fl = np.array([0, 1, 1, 2])
    fd_check(
        lambda v: concentration_loss(v, fl, ad.leaf(slow.value.copy()), sl),
        rng.normal(size=(4, 2)),
    )


def test_concentration_centroids_are_gradient_free():
    rng = np.random.default_rng(6)
    fast = ad.leaf(rng.normal(size=(4, 2)))
    slow = ad.leaf(rng.normal(size=(4, 2)))
    labels = np.array([0, 0, 1, 1])
    out = concentration_loss(fast, labels, slow, labels)
    grads = ad.backward(out.var, wanted=[slow])
    np.testing.assert_array_equal(grads[slow], np.zeros((4, 2)))


def test_concentration_fast_hand_case_and_live_centroids():
    fast = ad.leaf(np.array([[0.0], [2.0], [5.0]]))
    labels = np.array([1, 1, 2])
    out = concentration_loss_fast(fast, labels, np.array([0]), np.array([0, 1]))
    assert out.value == pytest.approx(1.0)  # centroid of rows 0,1 is 1.0
    grads = ad.backward(out.var, wanted=[fast])
    assert grads[fast][1, 0] != 0.0  # centroid rows stay differentiable


def test_concentration_fast_fd():
    rng = np.random.default_rng(7)
    labels = np.array([0, 0, 1, 1, 2, 2])
    fd_check(
        lambda v: concentration_loss_fast(v, labels, np.array([0, 2, 4]), np.array([1, 3, 5])),
        rng.normal(size=(6, 3)),
    )


def test_semantic_hand_case_and_floor():
    probs = ad.leaf(np.array([[0.5, 0.5]]))
    assert semantic_loss(probs, np.array([1])).value == pytest.approx(math.log(2.0))
    hard = ad.leaf(np.array([[1.0, 0.0]]))
    assert semantic_loss(hard, np.array([1])).value == pytest.approx(-math.log(1e-12))


def test_semantic_fd():
    rng = np.random.default_rng(8)
    raw = rng.uniform(0.05, 1.0, size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    fd_check(lambda v: semantic_loss(v, labels), raw)


@pytest.mark.parametrize("push", ["literal", "repulsive"])
def test_ae_fd(push):
    rng = np.random.default_rng(9)
    labels = np.array([0, 0, 1, 2, 2])
    fd_check(lambda v: ae_loss(v, labels, push=push), rng.normal(size=(5, 2)))


def test_ae_hand_cases_both_push_forms():
    e = np.array([[0.0], [2.0]])
    labels = np.array([4, 9])
    literal = ae_loss(emb(e), labels, push="literal").value
    assert literal == pytest.approx(2.0)  # pull 0, mean ordered-pair d2 = 8/4
    repulsive = ae_loss(emb(e), labels, push="repulsive").value
    assert repulsive == pytest.approx((2.0 + 2.0 * math.exp(-2.0)) / 4.0)


def test_ae_literal_push_rewards_collapse():
    """The as-printed push term prefers coincident centroids; the repulsive
    form penalizes them.  Keeping both routes apart is the point."""
    labels = np.array([0, 1])
    together = np.array([[0.0], [0.0]])
    apart = np.array([[0.0], [3.0]])
    assert ae_loss(emb(together), labels, "literal").value < ae_loss(emb(apart), labels, "literal").value
    assert ae_loss(emb(together), labels, "repulsive").value > ae_loss(emb(apart), labels, "repulsive").value


def test_ae_rejects_unknown_push():
    with pytest.raises(ValueError, match="push"):
        ae_loss(emb([[0.0]]), np.array([0]), push="bogus")


def test_margin_hand_cases():
    e = np.array([[0.0], [0.5]])
    diff = margin_loss(emb(e), np.array([0, 1]), eps=1.0).value
    assert diff == pytest.approx(0.375)  # two pairs pay 1 - 0.25, over 4
    same = margin_loss(emb(e), np.array([0, 0]), eps=1.0).value
    assert same == pytest.approx(0.125)  # two pairs pay d2 = 0.25, over 4
    sep = margin_loss(emb([[0.0], [2.0]]), np.array([0, 1]), eps=1.0).value
    assert sep == 0.0  # hinge fully satisfied


def test_margin_fd_away_from_hinge():
    rng = np.random.default_rng(10)
    e = rng.normal(size=(6, 2)) * 2.0
    labels = rng.integers(0, 3, size=6)
    d2 = ((e[:, None] - e[None, :]) ** 2).sum(-1)
    off = d2[~np.eye(6, dtype=bool)]
    assert np.abs(off - 1.0).min() > 1e-3  # no pair sits on the kink
    fd_check(lambda v: margin_loss(v, labels, eps=1.0), e)


def test_linear_assignment_hand_case():
    probs = ad.leaf(np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]]))
    out, seg_channel = linear_assignment_loss(probs, np.array([4, 4, 6]))
    np.testing.assert_array_equal(seg_channel, [0, 1])
    want = -(math.log(0.9) + math.log(0.8) + math.log(0.9)) / 3.0
    assert out.value == pytest.approx(want)


def test_linear_assignment_overflow_is_an_error():
    probs = ad.leaf(np.full((3, 2), 0.5))
    with pytest.raises(ValueError, match="segments exceed"):
        linear_assignment_loss(probs, np.array([1, 2, 3]))


def test_linear_assignment_fd_with_fixed_assignment():
    rng = np.random.default_rng(11)
    raw = rng.uniform(0.1, 1.0, size=(8, 4))
    labels = np.array([0, 0, 1, 1, 2, 2, 2, 0])
    fd_check(lambda v: linear_assignment_loss(v, labels)[0], raw)


def test_losses_are_invariant_under_relabeling():
    rng = np.random.default_rng(12)
    e = rng.normal(size=(10, 3))
    labels = rng.integers(0, 4, size=10)
    remap = {0: 17, 1: 3, 2: 99, 3: 41}
    relabeled = np.array([remap[int(v)] for v in labels])
    for build in (
        lambda lab: contrastive_loss(emb(e), lab, gamma=0.8).value,
        lambda lab: slowfast_loss(emb(e[:5]), lab[:5], emb(e[5:]), lab[5:]).value,
        lambda lab: concentration_loss(emb(e[:5]), lab[:5], emb(e[5:]), lab[5:]).value,
        lambda lab: ae_loss(emb(e), lab, "literal").value,
        lambda lab: ae_loss(emb(e), lab, "repulsive").value,
        lambda lab: margin_loss(emb(e), lab).value,
        lambda lab: linear_assignment_loss(emb(np.abs(e) + 0.1), lab)[0].value,
    ):
        assert build(labels) == build(relabeled)


def test_grad_relative_variance_hand_cases():
    assert grad_relative_variance(np.array([1.0, 3.0])) == pytest.approx(0.5)
    assert math.isnan(grad_relative_variance(np.zeros(4)))
    assert grad_relative_variance(np.array([-2.0, 2.0])) == 0.0


def test_loss_value_exposes_float():
    lv = LossValue(ad.const(np.array(2.5)))
    assert lv.value == 2.5 and lv.skipped_fraction == 0.0

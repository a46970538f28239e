"""Training losses over rendered pixels.

The instance losses all operate on per-pixel rendered embeddings and their 2D
segment labels from a single image.  Pair affinities use a Gaussian kernel
k(a, b) = exp(-gamma ||a - b||^2), and the contrastive objectives exponentiate
that similarity again, so each pair contributes exp(k(a, b)) to its softmax;
both log-sum-exp ratios are evaluated with max subtraction and stay finite for
embedding norms up to 1e3 and gamma up to 1e2.

Group reductions (centroids, segment costs) always enumerate labels in order
of first occurrence within the batch, never by label value, so relabeling a
batch permutes nothing and reproduces bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tracking import hungarian

PROB_FLOOR = 1e-12
_MASK_FILL = -1e30


@dataclass
class LossValue:
    """A scalar loss node plus its diagnostics."""

    var: Var
    skipped_fraction: float = 0.0

    @property
    def value(self) -> float:
        return float(self.var.value)


def _check_single_image(image_ids) -> None:
    if image_ids is None:
        return
    ids = np.asarray(image_ids)
    if ids.size and np.any(ids != ids.flat[0]):
        raise ValueError("instance losses require pixels from a single image per batch")


def rbf_similarity(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma ||a - b||^2) for one pair or batched rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.exp(-gamma * np.sum((a - b) ** 2, axis=-1))


def photometric_loss(rendered: Var, target: np.ndarray) -> LossValue:
    """Mean squared color error, averaged over pixels."""
    diff = ad.sub(rendered, ad.const(np.asarray(target, dtype=np.float64)))
    per_pixel = ad.sqsum(diff, axis=1)
    return LossValue(ad.vmean(per_pixel))


def _pair_logits(a: Var, b: Var, gamma: float) -> Var:
    """Log of each pair's affinity exp(sim(a, b)), i.e. the similarity itself."""
    return ad.vexp(ad.mul(ad.pairwise_sqdist(a, b), ad.const(-gamma)))


def _softmax_ratio_loss(logits: Var, pos: np.ndarray) -> tuple[Var, float]:
    """-mean_u log( sum_{pos} exp(l_u.) / sum_all exp(l_u.) ), skipping
    anchors with no positive entry; returns the loss and skipped fraction."""
    n = logits.value.shape[0]
    valid = pos.any(axis=1)
    skipped = 1.0 - valid.sum() / n if n else 0.0
    if not valid.any():
        return ad.mul(ad.vsum(logits), ad.const(0.0)), 1.0
    rows = np.flatnonzero(valid)
    sub = ad.gather_rows(logits, rows) if len(rows) < n else logits
    lse_all = ad.logsumexp(sub, axis=1)
    lse_pos = ad.logsumexp(sub, axis=1, mask=pos[rows])
    return ad.neg(ad.vmean(ad.sub(lse_pos, lse_all))), skipped


def contrastive_loss(
    embeddings: Var,
    labels: np.ndarray,
    gamma: float = 1.0,
    image_ids: np.ndarray | None = None,
) -> LossValue:
    """Vanilla single-field contrastive loss over all same-image pairs.

    Positives are pairs with equal 2D segment labels; the anchor itself is
    included in both the numerator and the denominator.
    """
    _check_single_image(image_ids)
    labels = np.asarray(labels)
    logits = _pair_logits(embeddings, embeddings, gamma)
    pos = labels[:, None] == labels[None, :]
    loss, skipped = _softmax_ratio_loss(logits, pos)
    return LossValue(loss, skipped)


def slowfast_loss(
    fast: Var,
    fast_labels: np.ndarray,
    slow: Var,
    slow_labels: np.ndarray,
    gamma: float = 1.0,
    image_ids: np.ndarray | None = None,
) -> LossValue:
    """Cross-half contrastive loss: anchors from the fast half, positives and
    negatives from the slow half.  The slow embeddings carry no gradient, so
    anchors chase a target that only moves through the EMA.

    Anchors whose label is absent from the slow half are skipped and reported
    via ``skipped_fraction``.
    """
    _check_single_image(image_ids)
    logits = _pair_logits(fast, ad.stop(slow), gamma)
    pos = np.asarray(fast_labels)[:, None] == np.asarray(slow_labels)[None, :]
    loss, skipped = _softmax_ratio_loss(logits, pos)
    return LossValue(loss, skipped)


def _group_order(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct labels in first-occurrence order plus per-row group index."""
    labels = np.asarray(labels)
    uniq, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return uniq[order], rank[inverse]


def concentration_loss(
    fast: Var,
    fast_labels: np.ndarray,
    slow: Var,
    slow_labels: np.ndarray,
    image_ids: np.ndarray | None = None,
) -> LossValue:
    """Mean squared distance from each fast anchor to the slow centroid of its
    own segment, computed over the slow half.  Centroids are constants (the
    slow field is gradient-free), so this only pulls the fast half inward.
    """
    _check_single_image(image_ids)
    slow_vals = slow.value
    groups, gidx = _group_order(slow_labels)
    k = len(groups)
    d = slow_vals.shape[1]
    sums = np.zeros((k, d))
    np.add.at(sums, gidx, slow_vals)
    counts = np.bincount(gidx, minlength=k).astype(np.float64)
    centroids = sums / counts[:, None]

    fast_labels = np.asarray(fast_labels)
    lookup = {lab: i for i, lab in enumerate(groups)}
    target_idx = np.array([lookup.get(lab, -1) for lab in fast_labels])
    valid = target_idx >= 0
    n = len(fast_labels)
    skipped = 1.0 - valid.sum() / n if n else 0.0
    if not valid.any():
        return LossValue(ad.mul(ad.vsum(fast), ad.const(0.0)), 1.0)
    rows = np.flatnonzero(valid)
    anchors = ad.gather_rows(fast, rows) if len(rows) < n else fast
    target = centroids[target_idx[valid]]
    per_anchor = ad.sqsum(ad.sub(anchors, ad.const(target)), axis=1)
    return LossValue(ad.vmean(per_anchor), skipped)


def concentration_loss_fast(fast: Var, labels: np.ndarray, anchor_rows: np.ndarray, centroid_rows: np.ndarray) -> LossValue:
    """Concentration variant without a slow field: centroids come from the
    fast embeddings on ``centroid_rows`` and stay differentiable."""
    labels = np.asarray(labels)
    cen_emb = ad.gather_rows(fast, centroid_rows)
    groups, gidx = _group_order(labels[centroid_rows])
    k = len(groups)
    onehot = np.zeros((k, len(centroid_rows)))
    onehot[gidx, np.arange(len(centroid_rows))] = 1.0
    counts = onehot.sum(axis=1, keepdims=True)
    centroids = ad.matmul(ad.const(onehot / counts), cen_emb)

    lookup = {lab: i for i, lab in enumerate(groups)}
    target_idx = np.array([lookup.get(lab, -1) for lab in labels[anchor_rows]])
    valid = target_idx >= 0
    skipped = 1.0 - valid.sum() / len(anchor_rows) if len(anchor_rows) else 0.0
    if not valid.any():
        return LossValue(ad.mul(ad.vsum(fast), ad.const(0.0)), 1.0)
    anchors = ad.gather_rows(fast, anchor_rows[valid])
    targets = ad.gather_rows(centroids, target_idx[valid])
    return LossValue(ad.vmean(ad.sqsum(ad.sub(anchors, targets), axis=1)), skipped)


def semantic_loss(probs: Var, labels: np.ndarray) -> LossValue:
    """Cross-entropy on rendered class probabilities, clamped at 1e-12."""
    p = ad.take_along(probs, np.asarray(labels, dtype=np.int64))
    return LossValue(ad.neg(ad.vmean(ad.vlog(ad.clip_min(p, PROB_FLOOR)))))


def ae_loss(embeddings: Var, labels: np.ndarray, push: str = "literal") -> LossValue:
    """Associative-embedding loss.

    The pull term averages squared distances to each segment's centroid over
    all pixels.  The push term, as printed, *adds* the mean squared centroid
    separation over all ordered centroid pairs (self-pairs contribute zero);
    ``push="repulsive"`` swaps in sum exp(-||.||^2 / 2) / K^2 instead, whose
    self-pairs each contribute one.
    """
    if push not in ("literal", "repulsive"):
        raise ValueError(f"unknown push form {push!r}")
    labels = np.asarray(labels)
    n = len(labels)
    groups, gidx = _group_order(labels)
    k = len(groups)
    onehot = np.zeros((k, n))
    onehot[gidx, np.arange(n)] = 1.0
    counts = onehot.sum(axis=1, keepdims=True)
    centroids = ad.matmul(ad.const(onehot / counts), embeddings)

    spread = ad.sqsum(ad.sub(embeddings, ad.gather_rows(centroids, gidx)), axis=1)
    pull = ad.vmean(spread)

    pair_d2 = ad.pairwise_sqdist(centroids, centroids)
    if push == "literal":
        push_term = ad.mul(ad.vsum(pair_d2), ad.const(1.0 / (k * k)))
    else:
        push_term = ad.mul(ad.vsum(ad.vexp(ad.mul(pair_d2, ad.const(-0.5)))), ad.const(1.0 / (k * k)))
    return LossValue(ad.add(pull, push_term))


def margin_loss(embeddings: Var, labels: np.ndarray, eps: float = 1.0) -> LossValue:
    """Hinged pairwise loss over all ordered pairs: same-label pairs pay their
    squared distance, different-label pairs pay max(0, eps - d^2)."""
    labels = np.asarray(labels)
    n = len(labels)
    d2 = ad.pairwise_sqdist(embeddings, embeddings)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    attract = ad.mul(d2, ad.const(same))
    repel = ad.mul(ad.maximum_const(ad.sub(ad.const(np.full((n, n), eps)), d2), 0.0), ad.const(1.0 - same))
    return LossValue(ad.mul(ad.vsum(ad.add(attract, repel)), ad.const(1.0 / (n * n))))


def linear_assignment_loss(probs: Var, labels: np.ndarray, image_ids: np.ndarray | None = None) -> tuple[LossValue, np.ndarray]:
    """Cross-entropy against the channel each 2D segment is assigned to.

    Builds the segment-by-channel cost C[s, k] = -mean_{u in s} p_u[k],
    solves the assignment exactly (cubic in the channel count, which is the
    point of benchmarking it), then scores every pixel against its segment's
    channel.  Returns the loss and the channel index per segment.
    """
    _check_single_image(image_ids)
    labels = np.asarray(labels)
    k_channels = probs.value.shape[1]
    groups, gidx = _group_order(labels)
    if len(groups) > k_channels:
        raise ValueError(f"{len(groups)} segments exceed the {k_channels}-way output")
    n = len(labels)
    onehot = np.zeros((len(groups), n))
    onehot[gidx, np.arange(n)] = 1.0
    counts = onehot.sum(axis=1, keepdims=True)
    cost = -(onehot / counts) @ probs.value
    assignment = hungarian(cost)
    seg_channel = np.full(len(groups), -1, dtype=np.int64)
    for r, c in assignment.pairs:
        seg_channel[r] = c
    target = seg_channel[gidx]
    p = ad.take_along(probs, target)
    loss = ad.neg(ad.vmean(ad.vlog(ad.clip_min(p, PROB_FLOOR))))
    return LossValue(loss), seg_channel


def grad_relative_variance(grad_slice: np.ndarray) -> float:
    """Var/mean of |g| over one parameter slice; NaN when the mean is zero."""
    g = np.abs(np.asarray(grad_slice, dtype=np.float64))
    m = g.mean()
    if m == 0.0:
        return float("nan")
    return float(g.var() / m)

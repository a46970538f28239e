"""Turning rendered embeddings into discrete instance labels.

After training, every foreground pixel renders to a point in embedding
space.  Pixels of one object form a tight clump there, so density-based
clustering recovers one centroid per object; labeling a frame is then a
nearest-centroid lookup.  Clustering runs independently per semantic class
and the resulting centroids share a single global ID space, which is what
makes labels consistent across views.

The cluster step is deliberately insensitive to how the samples were
gathered: coordinates are deduplicated before any densities are counted, and
clusters are numbered by the lexicographic order of their centroids, so
duplicating samples or permuting their order cannot change the outcome, bit
for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .metrics import pq_frame
from .rendering import Camera, ray_spans, render_batch, render_frame_maps

UNMATCHED_ID = 65535

MIN_SIZE_CANDIDATES = (1, 2, 3, 4, 6, 8, 12, 16)


@dataclass
class SampleSet:
    """Foreground embedding samples pooled over rendered views."""

    embeddings: np.ndarray  # (P, D)
    classes: np.ndarray  # (P,) predicted semantic class per sample
    sources: np.ndarray  # (P, 2) camera index, flat pixel index

    def __len__(self) -> int:
        return len(self.embeddings)

    def for_class(self, cls: int) -> np.ndarray:
        return self.embeddings[self.classes == cls]


def build_sample_set(
    model,
    cameras: list[Camera],
    bounds: list[tuple[float, float]],
    n_pixels: int,
    n_views: int,
    rng: np.random.Generator,
    n_samples: int = 32,
) -> SampleSet:
    """Render embeddings at uniformly drawn pixels of randomly drawn views.

    Views are drawn with replacement, so ``n_views`` may exceed the camera
    count.  Pixels whose rendered semantic class is background are dropped;
    everything else lands in the pool with its provenance.
    """
    if len(cameras) != len(bounds):
        raise ValueError("need one near/far pair per camera")
    if n_pixels < 0 or n_views < 1:
        raise ValueError("need n_pixels >= 0 and n_views >= 1")
    view_idx = rng.integers(0, len(cameras), size=n_views)
    per_view = np.full(n_views, n_pixels // n_views, dtype=np.int64)
    per_view[: n_pixels % n_views] += 1

    leaves = model.leaves(frozenset())
    embs, clss, srcs = [], [], []
    for vi, count in zip(view_idx, per_view):
        if count == 0:
            continue
        cam = cameras[vi]
        near, far = bounds[vi]
        pix = rng.integers(0, cam.width * cam.height, size=count)
        uv = cam.pixel_grid()[pix]
        origins, dirs = cam.pixel_rays(uv)
        lo, hi = ray_spans(origins, dirs, model.cfg.cube_half, near, far)
        batch, _ = render_batch(model, leaves, cam, uv, n_samples, lo, hi)
        emb = batch.render_instance().value
        probs, _ = batch.render_semantic()
        cls = probs.value.argmax(axis=1)
        keep = cls != 0
        embs.append(emb[keep])
        clss.append(cls[keep])
        srcs.append(np.stack([np.full(keep.sum(), vi, dtype=np.int64), pix[keep]], axis=1))
    if embs:
        return SampleSet(np.concatenate(embs), np.concatenate(clss), np.concatenate(srcs))
    d = model.cfg.embed_dim
    return SampleSet(np.empty((0, d)), np.empty(0, dtype=np.int64), np.empty((0, 2), dtype=np.int64))


def median_knn_eps(points: np.ndarray, k: int = 5) -> float:
    """Median distance to the k-th nearest neighbor over deduplicated points."""
    uniq = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(uniq) < 2:
        return 1.0
    kk = min(k, len(uniq) - 1)
    dist, _ = cKDTree(uniq).query(uniq, k=kk + 1)
    return float(np.median(dist[:, kk]))


def density_cluster(points: np.ndarray, eps: float | None = None, min_cluster_size: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Density-reachability clustering; returns per-point labels and centroids.

    A point is a core point when at least ``min_cluster_size`` distinct
    coordinates (itself included) lie within ``eps`` of it; cores linked
    within ``eps`` share a cluster, every non-core point joins its
    lexicographically first core neighbor, and the leftovers are noise,
    labeled -1.  ``eps`` defaults to :func:`median_knn_eps`.

    Labels index into the returned centroid array, which is sorted
    lexicographically; densities are counted over deduplicated coordinates
    and centroids averaged over them, so the outcome is invariant to sample
    order and duplication.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be (n, d)")
    if min_cluster_size < 1:
        raise ValueError("min_cluster_size must be at least 1")
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, pts.shape[1] if pts.ndim == 2 else 0))
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    n = len(uniq)
    if eps is None:
        eps = median_knn_eps(uniq)
    if eps <= 0:
        raise ValueError("eps must be positive")

    tree = cKDTree(uniq)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    degree = np.bincount(pairs.ravel(), minlength=n) + 1
    core = degree >= min_cluster_size

    label = np.full(n, -1, dtype=np.int64)
    if core.any():
        both = core[pairs[:, 0]] & core[pairs[:, 1]] if len(pairs) else np.zeros(0, bool)
        edges = pairs[both]
        graph = sparse.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
        _, comp = csgraph.connected_components(graph, directed=False)
        label[core] = comp[core]
        if len(pairs):
            # Border points adopt their lexicographically first core neighbor.
            src = np.concatenate([pairs[:, 0], pairs[:, 1]])
            dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
            keep = core[dst] & ~core[src]
            first_core = np.full(n, n, dtype=np.int64)
            np.minimum.at(first_core, src[keep], dst[keep])
            border = (first_core < n) & ~core
            label[border] = comp[first_core[border]]

    groups = np.unique(label[label >= 0])
    if len(groups) == 0:
        return np.full(len(pts), -1, dtype=np.int64), np.empty((0, uniq.shape[1]))
    cents = np.array([uniq[label == g].mean(axis=0) for g in groups])
    order = np.lexsort(cents.T[::-1])
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    lut = np.full(int(groups.max()) + 1, -1, dtype=np.int64)
    lut[groups] = rank
    canon = np.where(label >= 0, lut[np.clip(label, 0, None)], -1)
    return canon[inverse], cents[order]


def hierarchical_cluster(
    samples: SampleSet,
    min_sizes: int | dict[int, int] = 1,
    eps: float | None = None,
) -> dict[int, list[tuple[int, np.ndarray]]]:
    """Cluster each semantic class separately into one shared ID space.

    Classes are processed in ascending order with IDs counting up from 1, so
    the cache is reproducible from the samples alone.  Class 0 is background
    and is never clustered; a class present in the samples but yielding no
    clusters gets an empty entry.  ``min_sizes`` may be a single threshold or
    a per-class mapping.
    """
    cache: dict[int, list[tuple[int, np.ndarray]]] = {}
    next_id = 1
    for cls in sorted(int(c) for c in np.unique(samples.classes)):
        if cls == 0:
            continue
        m = min_sizes.get(cls, 1) if isinstance(min_sizes, dict) else min_sizes
        _, cents = density_cluster(samples.for_class(cls), eps=eps, min_cluster_size=m)
        entries = []
        for cen in cents:
            entries.append((next_id, cen))
            next_id += 1
        cache[cls] = entries
    return cache


def assign_labels(embedding: np.ndarray, semantic: np.ndarray, cache: dict[int, list[tuple[int, np.ndarray]]]) -> np.ndarray:
    """Label a frame by nearest centroid within its pixel's semantic class.

    Background pixels get 0.  Pixels whose class has no centroids get
    ``UNMATCHED_ID``.  Distance ties resolve to the lowest global ID.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    sem = np.asarray(semantic)
    if emb.shape[:-1] != sem.shape:
        raise ValueError("embedding and semantic shapes disagree")
    flat_emb = emb.reshape(-1, emb.shape[-1])
    flat_sem = sem.ravel()
    out = np.zeros(len(flat_sem), dtype=np.int64)
    for cls in np.unique(flat_sem):
        if cls == 0:
            continue
        sel = np.nonzero(flat_sem == cls)[0]
        entries = sorted(cache.get(int(cls), []), key=lambda e: e[0])
        if not entries:
            out[sel] = UNMATCHED_ID
            continue
        ids = np.array([gid for gid, _ in entries], dtype=np.int64)
        cents = np.stack([cen for _, cen in entries])
        d2 = ((flat_emb[sel, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        out[sel] = ids[np.argmin(d2, axis=1)]
    return out.reshape(sem.shape)


def label_frames(
    model,
    cameras: list[Camera],
    bounds: list[tuple[float, float]],
    cache: dict[int, list[tuple[int, np.ndarray]]],
    n_samples: int = 32,
    chunk: int = 4096,
    want_color: bool = False,
) -> list[dict[str, np.ndarray]]:
    """Render each camera and attach its assigned instance-label map."""
    out = []
    for cam, (near, far) in zip(cameras, bounds):
        maps = render_frame_maps(model, cam, n_samples, near, far, chunk=chunk, want_color=want_color)
        maps["instance"] = assign_labels(maps["embedding"], maps["semantic"], cache)
        out.append(maps)
    return out


def tune_min_cluster_size(
    samples: SampleSet,
    frames: list[dict[str, np.ndarray]],
    references: list[np.ndarray],
    eps: float | None = None,
    candidates: tuple[int, ...] = MIN_SIZE_CANDIDATES,
) -> tuple[int, dict[int, float]]:
    """Pick the density threshold that best reproduces per-frame 2D labels.

    ``frames`` are pre-rendered maps for a held-in subset of the training
    views; ``references`` are those views' 2D labels, typically the noisy
    ones, which are a sound per-frame yardstick even though their IDs
    disagree across frames.  The score is mean per-frame panoptic quality;
    ties go to the smallest candidate.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    if len(frames) != len(references):
        raise ValueError("need one reference label map per rendered frame")
    scores: dict[int, float] = {}
    best, best_score = None, -1.0
    for m in candidates:
        cache = hierarchical_cluster(samples, min_sizes=m, eps=eps)
        vals = []
        for maps, ref in zip(frames, references):
            pred = assign_labels(maps["embedding"], maps["semantic"], cache)
            vals.append(pq_frame(pred, ref).pq)
        score = float(np.mean(vals)) if vals else 0.0
        scores[m] = score
        if score > best_score + 1e-12:
            best, best_score = m, score
    return int(best), scores

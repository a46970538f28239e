"""Tracking-style baselines that make per-view instance labels consistent.

Each tracker only *relabels* segments: the pixel partition of every frame is
preserved, so per-frame quality is untouched and only cross-view identity
changes.  Background (ID 0) is never relabeled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .rendering import Camera

IOU_MATCH_THRESHOLD = 0.1
POINT_OVERLAP_THRESHOLD = 0.1


@dataclass(frozen=True)
class Assignment:
    """Minimum-cost injective matching over a cost matrix."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def hungarian(cost: np.ndarray) -> Assignment:
    """Optimal assignment of min(rows, cols) pairs minimizing total cost.

    Rectangular matrices are handled by matching only the smaller side; NaN
    entries are a hard error rather than a silent skip.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost matrix must be 2D and non-empty, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(zip(rows.tolist(), cols.tolist()))
    return Assignment(pairs, float(cost[rows, cols].sum()))


def _segments_of(label_map: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Foreground segment IDs (first-occurrence order) and their flat pixel sets."""
    flat = label_map.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = np.argsort(first, kind="stable")
    ids = ids[order]
    pixel_sets = [np.flatnonzero(flat == i) for i in ids]
    return ids, pixel_sets


def _iou_matrix(prev_map: np.ndarray, cur_map: np.ndarray, prev_ids, cur_ids) -> np.ndarray:
    """IoU between foreground segments of two equally shaped label maps."""
    a = prev_map.ravel()
    b = cur_map.ravel()
    amap = {v: i for i, v in enumerate(prev_ids)}
    bmap = {v: i for i, v in enumerate(cur_ids)}
    out = np.zeros((len(prev_ids), len(cur_ids)))
    both = (a != 0) & (b != 0)
    if both.any():
        pa = np.array([amap[v] for v in a[both]])
        pb = np.array([bmap[v] for v in b[both]])
        inter = np.zeros_like(out)
        np.add.at(inter, (pa, pb), 1.0)
        sizes_a = np.array([(a == v).sum() for v in prev_ids], dtype=np.float64)
        sizes_b = np.array([(b == v).sum() for v in cur_ids], dtype=np.float64)
        union = sizes_a[:, None] + sizes_b[None, :] - inter
        out = inter / union
    return out


class _IdAllocator:
    def __init__(self):
        self.next_id = 1

    def fresh(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i


def _relabel(cur_map: np.ndarray, cur_ids, mapping: dict[int, int]) -> np.ndarray:
    out = np.zeros_like(cur_map)
    for cid in cur_ids:
        out[cur_map == cid] = mapping[cid]
    return out


def _match_by_iou(iou: np.ndarray, prev_global: list[int], cur_ids, alloc: _IdAllocator, threshold: float) -> dict[int, int]:
    """Assign global IDs to current segments from an IoU table against the
    previous frame's (already global) segments."""
    mapping: dict[int, int] = {}
    if iou.size:
        assignment = hungarian(1.0 - iou)
        for r, c in assignment.pairs:
            if iou[r, c] >= threshold:
                mapping[cur_ids[c]] = prev_global[r]
    for cid in cur_ids:
        if cid not in mapping:
            mapping[cid] = alloc.fresh()
    return mapping


def track_iou(maps: list[np.ndarray], threshold: float = IOU_MATCH_THRESHOLD) -> list[np.ndarray]:
    """Greedy consecutive-frame association by mask overlap.

    Frame t segments are matched to frame t-1 segments with an optimal
    assignment on cost 1 - IoU; matches below the IoU threshold start fresh
    IDs.  An object that disappears and returns cannot be re-associated.
    """
    alloc = _IdAllocator()
    out: list[np.ndarray] = []
    for t, cur in enumerate(maps):
        cur_ids, _ = _segments_of(cur)
        if t == 0:
            mapping = {cid: alloc.fresh() for cid in cur_ids}
        else:
            prev_ids, _ = _segments_of(out[-1])
            iou = _iou_matrix(out[-1], cur, prev_ids, cur_ids)
            mapping = _match_by_iou(iou, list(prev_ids), list(cur_ids), alloc, threshold)
        out.append(_relabel(cur, cur_ids, mapping))
    return out


def warp_labels(
    src_map: np.ndarray,
    src_depth: np.ndarray,
    src_camera: Camera,
    dst_camera: Camera,
) -> np.ndarray:
    """Reproject a label map into another camera, z-buffered by target depth.

    Pixels with non-finite depth are dropped; collisions keep the point
    closest to the target camera.  Unfilled target pixels stay background.
    """
    h, w = src_map.shape
    uv = src_camera.pixel_grid()
    flat_labels = src_map.ravel()
    depth = src_depth.ravel()
    valid = np.isfinite(depth) & (flat_labels != 0)
    if not valid.any():
        return np.zeros((dst_camera.height, dst_camera.width), dtype=src_map.dtype)
    origins, dirs = src_camera.pixel_rays(uv[valid])
    pts = origins + depth[valid, None] * dirs
    proj, z = dst_camera.project(pts)
    uu = np.round(proj[:, 0] - 0.5).astype(np.int64)
    vv = np.round(proj[:, 1] - 0.5).astype(np.int64)
    ok = (z > 0) & (uu >= 0) & (uu < dst_camera.width) & (vv >= 0) & (vv < dst_camera.height)
    uu, vv, z = uu[ok], vv[ok], z[ok]
    labels = flat_labels[valid][ok]
    target = np.zeros((dst_camera.height, dst_camera.width), dtype=src_map.dtype)
    zbuf = np.full((dst_camera.height, dst_camera.width), np.inf)
    order = np.argsort(-z, kind="stable")  # nearest written last wins
    target[vv[order], uu[order]] = labels[order]
    zbuf[vv[order], uu[order]] = z[order]
    return target


def track_warp(
    maps: list[np.ndarray],
    depths: list[np.ndarray],
    cameras: list[Camera],
    threshold: float = IOU_MATCH_THRESHOLD,
) -> list[np.ndarray]:
    """Depth-warp association: the previous frame's labels are unprojected
    with its depth map and reprojected into the current camera before the
    same IoU matching as :func:`track_iou`.  With identical cameras the warp
    is the identity and the result reduces to ``track_iou`` exactly.
    """
    alloc = _IdAllocator()
    out: list[np.ndarray] = []
    for t, cur in enumerate(maps):
        cur_ids, _ = _segments_of(cur)
        if t == 0:
            mapping = {cid: alloc.fresh() for cid in cur_ids}
        else:
            warped = warp_labels(out[-1], depths[t - 1], cameras[t - 1], cameras[t])
            prev_ids, _ = _segments_of(out[-1])
            present = [p for p in prev_ids if (warped == p).any()]
            iou = _iou_matrix(warped, cur, present, cur_ids) if present else np.zeros((0, len(cur_ids)))
            mapping = _match_by_iou(iou, present, list(cur_ids), alloc, threshold)
        out.append(_relabel(cur, cur_ids, mapping))
    return out


def track_pointcloud(
    maps: list[np.ndarray],
    depths: list[np.ndarray],
    cameras: list[Camera],
    radius: float,
    threshold: float = POINT_OVERLAP_THRESHOLD,
) -> list[np.ndarray]:
    """Fuse segments into global 3D point sets and match against all of them.

    Per frame, each segment's unprojected points are scored against every
    global set by the fraction lying within ``radius`` of it (an optimal
    assignment on 1 - fraction); accepted matches merge their points into the
    set, so an object can be re-acquired after a long occlusion.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    alloc = _IdAllocator()
    global_points: dict[int, list[np.ndarray]] = {}
    global_trees: dict[int, cKDTree] = {}
    out: list[np.ndarray] = []
    for t, cur in enumerate(maps):
        cur_ids, _ = _segments_of(cur)
        seg_pts = _segment_points(cur, depths[t], cameras[t], cur_ids)
        gids = sorted(global_points)
        mapping: dict[int, int] = {}
        if gids and len(cur_ids):
            overlap = np.zeros((len(cur_ids), len(gids)))
            for i, cid in enumerate(cur_ids):
                pts = seg_pts[cid]
                if not len(pts):
                    continue
                for j, g in enumerate(gids):
                    d, _ = global_trees[g].query(pts, k=1, distance_upper_bound=radius)
                    overlap[i, j] = np.mean(np.isfinite(d))
            assignment = hungarian(1.0 - overlap)
            for r, c in assignment.pairs:
                if overlap[r, c] >= threshold:
                    mapping[cur_ids[r]] = gids[c]
        for cid in cur_ids:
            if cid not in mapping:
                mapping[cid] = alloc.fresh()
            gid = mapping[cid]
            if len(seg_pts[cid]):
                global_points.setdefault(gid, []).append(seg_pts[cid])
                global_trees[gid] = cKDTree(np.concatenate(global_points[gid]))
        out.append(_relabel(cur, cur_ids, mapping))
    return out


def _segment_points(label_map: np.ndarray, depth: np.ndarray, camera: Camera, ids) -> dict[int, np.ndarray]:
    flat = label_map.ravel()
    d = depth.ravel()
    valid = np.isfinite(d) & (flat != 0)
    uv = camera.pixel_grid()[valid]
    origins, dirs = camera.pixel_rays(uv)
    pts = origins + d[valid, None] * dirs
    labels = flat[valid]
    return {i: pts[labels == i] for i in ids}


def default_fusion_radius(min_object_radius: float) -> float:
    """Half the smallest ground-truth object radius of the scene."""
    return 0.5 * min_object_radius

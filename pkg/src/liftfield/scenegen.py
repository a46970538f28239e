"""Synthetic multi-object scene generator with exact labels and a noise model.

Scenes are flat-shaded primitives (spheres and axis-aligned boxes) resting on
a finite ground plane, imaged by cameras on a dome shell that all aim at the
scene center.  Ground truth is rendered analytically: one ray per pixel
center, nearest hit wins, no antialiasing, so instance masks are pixel-exact.

Scaling follows a fold-out law in the object count N: the content half-extent
grows with sqrt(N) (constant floor density), focal length f = f0 *
sqrt(N / 25) and camera count M = min(M_cap, round(M0 * sqrt(N / 25))), which
together keep the objects-per-image statistic roughly constant across N.

The label-noise model mimics an inconsistent 2D segmenter: a fresh random ID
permutation per view, random half-plane splits of single segments, and
boundary flips toward an adjacent segment.  Background pixels are never
touched.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .fileio import Dataset, SceneMeta
from .rendering import Camera

THEMES = {
    "old_room": {
        "floor": (0.46, 0.34, 0.24),
        "light": (0.45, -0.30, 0.85),
    },
    "large_corridor": {
        "floor": (0.30, 0.35, 0.42),
        "light": (-0.35, 0.40, 0.83),
    },
}


@dataclass(frozen=True)
class GenConfig:
    """Desk-scale generator defaults; all knobs serializable as flat JSON."""

    n_objects: int = 8
    seed: int = 0
    width: int = 64
    height: int = 64
    views: int = 0  # 0 means "use the camera-count law"
    f0: float = 260.0  # focal in pixels at N = 25 for a 64-pixel-wide image
    h0: float = 2.5  # content half-extent at N = 25
    m0: int = 24
    m_cap: int = 48
    radius_min: float = 0.26
    radius_max: float = 0.40
    box_fraction: float = 0.5
    gap: float = 0.10
    theme: str = "old_room"
    permute: bool = True
    p_split: float = 0.1
    p_flip: float = 0.05
    elevation_min_deg: float = 28.0
    elevation_max_deg: float = 62.0
    cam_dist_factor: float = 2.0
    ambient: float = 0.35
    diffuse: float = 0.65

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown generator config keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class SceneObject:
    kind: str  # "sphere" or "box"
    center: np.ndarray
    size: np.ndarray  # (radius,) for spheres, half-extents (3,) for boxes
    color: np.ndarray
    instance_id: int
    semantic_class: int = 1

    @property
    def horizontal_radius(self) -> float:
        if self.kind == "sphere":
            return float(self.size[0])
        return float(np.hypot(self.size[0], self.size[1]))

    @property
    def min_radius(self) -> float:
        return float(np.min(self.size))


@dataclass
class Scene:
    objects: list[SceneObject]
    floor_half: float
    floor_color: np.ndarray
    light_dir: np.ndarray
    ambient: float
    diffuse: float
    cube_half: float
    meta: SceneMeta = field(init=False)

    def __post_init__(self):
        min_r = min((o.min_radius for o in self.objects), default=self.floor_half)
        radius = math.sqrt(2.0 * self.floor_half**2 + 1.2**2) * 1.02
        self.meta = SceneMeta(np.array([0.0, 0.0, 0.35]), radius, min_r)


def content_half_extent(n_objects: int, h0: float) -> float:
    return h0 * math.sqrt(n_objects / 25.0)


def focal_for(n_objects: int, f0: float, width: int) -> float:
    return f0 * math.sqrt(n_objects / 25.0) * (width / 64.0)


def camera_count(n_objects: int, m0: int, m_cap: int) -> int:
    return min(m_cap, round(m0 * math.sqrt(n_objects / 25.0)))


def _object_palette(n: int, rng: np.random.Generator) -> np.ndarray:
    """Well-separated hues at fixed saturation/value, in a seeded rotation."""
    base = rng.uniform(0.0, 1.0)
    hues = (base + np.arange(n) * 0.61803398875) % 1.0
    out = np.empty((n, 3))
    for i, h in enumerate(hues):
        out[i] = _hsv_to_rgb(h, 0.68, 0.92)
    return out


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def make_scene(cfg: GenConfig) -> tuple[Scene, list[Camera]]:
    """Scene geometry plus its dome-shell cameras, fully seeded."""
    if cfg.n_objects < 1:
        raise ValueError("need at least one object")
    if cfg.theme not in THEMES:
        raise ValueError(f"unknown theme {cfg.theme!r}; pick one of {sorted(THEMES)}")
    rng = np.random.default_rng(cfg.seed)
    h = content_half_extent(cfg.n_objects, cfg.h0)
    colors = _object_palette(cfg.n_objects, rng)

    # Rejection sampling cannot backtrack, so a run that corners itself is
    # thrown away and placement restarts from scratch on the same stream.
    objects: list[SceneObject] = []
    for restart in range(60):
        objects.clear()
        placed: list[tuple[float, float, float]] = []  # x, y, horizontal radius
        for i in range(cfg.n_objects):
            for attempt in range(3000):
                kind = "box" if rng.uniform() < cfg.box_fraction else "sphere"
                if kind == "sphere":
                    r = rng.uniform(cfg.radius_min, cfg.radius_max)
                    size = np.array([r])
                    hr = r
                    z = r
                else:
                    half = rng.uniform(cfg.radius_min * 0.8, cfg.radius_max * 0.9, size=3)
                    size = half
                    hr = float(np.hypot(half[0], half[1]))
                    z = half[2]
                lim = max(h - hr, 0.01)
                x, y = rng.uniform(-lim, lim, size=2)
                if all((x - px) ** 2 + (y - py) ** 2 >= (hr + pr + cfg.gap) ** 2 for px, py, pr in placed):
                    objects.append(SceneObject(kind, np.array([x, y, z]), size, colors[i], i + 1))
                    placed.append((x, y, hr))
                    break
            else:
                break
        if len(objects) == cfg.n_objects:
            break
    else:
        raise RuntimeError(f"could not place {cfg.n_objects} objects; lower the density or sizes")

    theme = THEMES[cfg.theme]
    floor_half = h + cfg.radius_max + 0.1
    light = np.asarray(theme["light"], dtype=np.float64)
    scene = Scene(
        objects=objects,
        floor_half=floor_half,
        floor_color=np.asarray(theme["floor"]),
        light_dir=light / np.linalg.norm(light),
        ambient=cfg.ambient,
        diffuse=cfg.diffuse,
        cube_half=floor_half * 1.12,
    )
    cameras = _dome_cameras(cfg, scene, rng)
    return scene, cameras


def _dome_cameras(cfg: GenConfig, scene: Scene, rng: np.random.Generator) -> list[Camera]:
    m = cfg.views if cfg.views > 0 else camera_count(cfg.n_objects, cfg.m0, cfg.m_cap)
    f = focal_for(cfg.n_objects, cfg.f0, cfg.width)
    dist = cfg.cam_dist_factor * scene.meta.radius
    target = scene.meta.center
    cams = []
    for k in range(m):
        azimuth = 2.0 * math.pi * (k + rng.uniform(-0.35, 0.35)) / m
        elev = math.radians(rng.uniform(cfg.elevation_min_deg, cfg.elevation_max_deg))
        pos = target + dist * np.array(
            [math.cos(elev) * math.cos(azimuth), math.cos(elev) * math.sin(azimuth), math.sin(elev)]
        )
        cams.append(_look_at_camera(pos, target, f, cfg.width, cfg.height))
    return cams


def _look_at_camera(position: np.ndarray, target: np.ndarray, focal: float, width: int, height: int) -> Camera:
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    # y points "down" in image space, so build it against world up.
    y_axis = -(up - np.dot(up, forward) * forward)
    y_axis = y_axis / np.linalg.norm(y_axis)
    x_axis = np.cross(y_axis, forward)
    rotation = np.stack([x_axis, y_axis, forward], axis=1)
    return Camera(rotation, position, focal, width / 2.0, height / 2.0, width, height)


# ---------------------------------------------------------------------------
# Analytic ground-truth rendering


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(o, d, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (lo - o) * inv
        t_hi = (hi - o) * inv
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
    t = np.where((t_far >= t_near) & (t_near > 1e-9), t_near, np.inf)
    # Rays starting inside the box exit through t_far.
    inside = (t_far >= np.maximum(t_near, 0.0)) & (t_near <= 1e-9) & (t_far > 1e-9)
    return np.where(inside, t_far, t)


def _box_normal(p, center, half):
    rel = (p - center) / half
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(rel[np.arange(len(p)), axis])
    return n


def render_gt(scene: Scene, camera: Camera) -> dict[str, np.ndarray]:
    """Exact maps for one camera: rgb, instance, semantic, depth.

    Ray misses get black color, ID 0, class 0 and +inf depth; the floor is
    background (ID 0, class 0) with its theme color.
    """
    o, d = camera.pixel_rays(camera.pixel_grid())
    n_px = len(d)
    best_t = np.full(n_px, np.inf)
    best_obj = np.full(n_px, -1, dtype=np.int64)

    # Horizontal rays give t = +-inf here and inf * 0 = nan below; both
    # compare False in the hit mask, which is the right answer for a miss.
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = -o[:, 2] / d[:, 2]
        fx = o[:, 0] + t_floor * d[:, 0]
        fy = o[:, 1] + t_floor * d[:, 1]
    floor_hit = (t_floor > 1e-9) & (np.abs(fx) <= scene.floor_half) & (np.abs(fy) <= scene.floor_half)
    best_t = np.where(floor_hit, t_floor, best_t)
    best_obj = np.where(floor_hit, 0, best_obj)

    for idx, obj in enumerate(scene.objects):
        if obj.kind == "sphere":
            t = _intersect_sphere(o, d, obj.center, obj.size[0])
        else:
            t = _intersect_box(o, d, obj.center, obj.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_obj = np.where(closer, idx + 1, best_obj)

    rgb = np.zeros((n_px, 3))
    instance = np.zeros(n_px, dtype=np.int64)
    semantic = np.zeros(n_px, dtype=np.int64)

    hit = best_obj >= 0
    with np.errstate(invalid="ignore"):  # missed rays carry t = inf
        p = o + best_t[:, None] * d
    shade = np.zeros(n_px)
    colors = np.zeros((n_px, 3))

    floor_sel = best_obj == 0
    if floor_sel.any():
        ndotl = max(scene.light_dir[2], 0.0)
        shade[floor_sel] = scene.ambient + scene.diffuse * ndotl
        colors[floor_sel] = scene.floor_color

    for idx, obj in enumerate(scene.objects):
        sel = best_obj == idx + 1
        if not sel.any():
            continue
        if obj.kind == "sphere":
            n = (p[sel] - obj.center) / obj.size[0]
        else:
            n = _box_normal(p[sel], obj.center, obj.size)
        ndotl = np.clip(n @ scene.light_dir, 0.0, None)
        shade[sel] = scene.ambient + scene.diffuse * ndotl
        colors[sel] = obj.color
        instance[sel] = obj.instance_id
        semantic[sel] = obj.semantic_class

    rgb[hit] = np.clip(colors[hit] * shade[hit, None], 0.0, 1.0)
    h, w = camera.height, camera.width
    return {
        "rgb": rgb.reshape(h, w, 3),
        "instance": instance.reshape(h, w),
        "semantic": semantic.reshape(h, w),
        "depth": np.where(np.isfinite(best_t), best_t, np.inf).reshape(h, w),
    }


# ---------------------------------------------------------------------------
# Label corruption


def corrupt_labels(instance: np.ndarray, rng: np.random.Generator, permute: bool = True, p_split: float = 0.1, p_flip: float = 0.05) -> np.ndarray:
    """Simulate an inconsistent per-view 2D segmenter.

    In order: remap foreground IDs by a fresh random permutation, split each
    segment with probability ``p_split`` along a random half-plane through its
    pixel mass (segments of two or more pixels always split into two
    non-empty parts), then flip boundary pixels to a differing foreground
    neighbor's ID with probability ``p_flip``.  The background mask is
    preserved exactly.
    """
    out = np.asarray(instance).copy()
    fg_ids = np.unique(out[out != 0])
    if len(fg_ids) == 0:
        return out
    if permute:
        perm = rng.permutation(fg_ids)
        lut = dict(zip(fg_ids.tolist(), perm.tolist()))
        remapped = out.copy()
        for src, dst in lut.items():
            remapped[out == src] = dst
        out = remapped
        fg_ids = np.unique(out[out != 0])

    next_id = int(out.max()) + 1
    for seg in fg_ids.tolist():
        if rng.uniform() >= p_split:
            continue
        ys, xs = np.nonzero(out == seg)
        if len(ys) < 2:
            continue
        theta = rng.uniform(0.0, 2.0 * math.pi)
        proj = xs * math.cos(theta) + ys * math.sin(theta)
        order = np.argsort(proj, kind="stable")
        half = len(order) // 2
        sel = order[:half]
        out[ys[sel], xs[sel]] = next_id
        next_id += 1

    if p_flip > 0:
        out = _boundary_flips(out, rng, p_flip)
    return out


def _boundary_flips(labels: np.ndarray, rng: np.random.Generator, p_flip: float) -> np.ndarray:
    h, w = labels.shape
    neighbors = np.zeros((4, h, w), dtype=labels.dtype)
    neighbors[0, 1:, :] = labels[:-1, :]
    neighbors[1, :-1, :] = labels[1:, :]
    neighbors[2, :, 1:] = labels[:, :-1]
    neighbors[3, :, :-1] = labels[:, 1:]
    fg = labels != 0
    valid = (neighbors != 0) & (neighbors != labels[None]) & fg[None]
    n_valid = valid.sum(axis=0)
    candidates = fg & (n_valid > 0)
    flip = candidates & (rng.uniform(size=(h, w)) < p_flip)
    if not flip.any():
        return labels
    out = labels.copy()
    ys, xs = np.nonzero(flip)
    pick = (rng.uniform(size=len(ys)) * n_valid[ys, xs]).astype(np.int64)
    for y, x, k in zip(ys, xs, pick):
        options = neighbors[valid[:, y, x], y, x]
        out[y, x] = options[k]
    return out


# ---------------------------------------------------------------------------
# Dataset assembly


def generate_dataset(cfg: GenConfig) -> Dataset:
    """Render a full dataset (clean and corrupted labels) for one scene."""
    scene, cameras = make_scene(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7_311]))
    rgb, inst, noisy, sem, depth = [], [], [], [], []
    for cam in cameras:
        maps = render_gt(scene, cam)
        rgb.append(maps["rgb"])
        inst.append(maps["instance"])
        sem.append(maps["semantic"])
        depth.append(maps["depth"])
        noisy.append(
            corrupt_labels(maps["instance"], rng, permute=cfg.permute, p_split=cfg.p_split, p_flip=cfg.p_flip)
        )
    ds = Dataset(
        cameras=cameras,
        meta=scene.meta,
        rgb=np.stack(rgb),
        instance_gt=np.stack(inst),
        instance_noisy=np.stack(noisy),
        semantic=np.stack(sem),
        depth=np.stack(depth),
    )
    return ds


def objects_per_image(instance_maps: np.ndarray) -> float:
    """Mean number of distinct foreground instances visible per frame."""
    maps = np.asarray(instance_maps)
    if maps.ndim == 2:
        maps = maps[None]
    counts = [len(np.unique(m[m != 0])) for m in maps]
    return float(np.mean(counts))


def scene_cube_half(meta: SceneMeta) -> float:
    """Field cube half-extent implied by recorded scene bounds.

    Inverts the bounding-radius formula used by :class:`Scene`, so training
    on a reloaded dataset places the cube exactly where the generator did.
    """
    floor_sq = max((meta.radius / 1.02) ** 2 - 1.2**2, 0.02) / 2.0
    return float(math.sqrt(floor_sq) * 1.12)

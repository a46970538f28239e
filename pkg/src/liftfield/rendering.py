"""Pinhole cameras, ray sampling and emission-absorption volume rendering.

The renderer follows the usual quadrature: with extinction sigma_i over a
segment of length delta_i, transmittance tau_i = exp(-sum_{j<i} sigma_j
delta_j) and per-sample weight w_i = tau_i * (1 - exp(-sigma_i delta_i)).
Weights telescope, so sum_i w_i = 1 - tau_N exactly; rays that exit without
terminating composite onto black.

Pixel convention: x right, y down, camera looks along +z in its own frame,
and the pose is world-from-camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .fields import FieldModel, freq_encode

PAYLOADS = ("color", "instance-fast", "instance-slow", "semantic")

# Rays whose rendered weight sum falls below this are treated as empty when
# semantic probabilities get renormalized.
EMPTY_RAY_EPS = 1e-8


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-from-camera rigid pose."""

    rotation: np.ndarray  # (3, 3), world-from-camera
    translation: np.ndarray  # (3,), camera center in world coordinates
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal (3, 3)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def pixel_rays(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit-direction rays through pixel coordinates ``uv`` (N, 2)."""
        uv = np.asarray(uv, dtype=np.float64)
        d_cam = np.stack(
            [
                (uv[:, 0] - self.cx) / self.focal,
                (uv[:, 1] - self.cy) / self.focal,
                np.ones(len(uv)),
            ],
            axis=1,
        )
        d = d_cam @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.translation, d.shape)
        return o, d

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points to pixel coordinates; also returns camera-frame depth z."""
        pc = (np.asarray(pts, dtype=np.float64) - self.translation) @ self.rotation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[:, 0] / z + self.cx
            v = self.focal * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixel_grid(self) -> np.ndarray:
        """Pixel-center coordinates of the full image, shape (H*W, 2).

        Pixel (row i, col j) is sampled at (u, v) = (j + 0.5, i + 0.5).
        """
        u, v = np.meshgrid(
            np.arange(self.width, dtype=np.float64) + 0.5,
            np.arange(self.height, dtype=np.float64) + 0.5,
        )
        return np.stack([u.ravel(), v.ravel()], axis=1)


def pixel_ray(camera: Camera, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    """Origin and unit direction of the ray through one pixel."""
    o, d = camera.pixel_rays(np.array([[u, v]]))
    return o[0], d[0]


def sample_ts(near: float, far: float, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Ray-parameter sample positions in [near, far].

    Uniform mode (``rng`` is None) spaces ``n`` samples evenly, endpoints
    included.  Stratified mode draws one uniform sample per even bin, so each
    sample stays inside its own bin.
    """
    if not (far > near):
        raise ValueError(f"need far > near, got [{near}, {far}]")
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if rng is None:
        return np.linspace(near, far, n)
    edges = np.linspace(near, far, n + 1)
    return edges[:-1] + rng.uniform(0.0, 1.0, size=n) * (edges[1:] - edges[:-1])


def sample_ts_batch(near, far, n: int, rows: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-ray sample positions, shape (rows, n); stratified when ``rng`` given.

    ``near`` and ``far`` may be scalars or per-ray arrays of length ``rows``.
    """
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (rows,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (rows,))
    if not np.all(far > near):
        raise ValueError("need far > near on every ray")
    span = (far - near)[:, None]
    if rng is None:
        frac = np.linspace(0.0, 1.0, n)
    else:
        frac = (np.arange(n) + rng.uniform(0.0, 1.0, size=(rows, n))) / n
    return near[:, None] + frac * span


def ray_spans(origins: np.ndarray, dirs: np.ndarray, cube_half: float, near: float, far: float) -> tuple[np.ndarray, np.ndarray]:
    """Clip [near, far] to each ray's intersection with the field cube.

    Rays that miss the cube get a token sliver at ``near`` (their samples land
    outside the cube, so they render empty either way).  Packing samples into
    the occupied span raises the effective sample density without changing
    what the quadrature can see.
    """
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t_a = (-cube_half - origins) / d
    t_b = (cube_half - origins) / d
    t0 = np.minimum(t_a, t_b).max(axis=-1)
    t1 = np.maximum(t_a, t_b).min(axis=-1)
    lo = np.clip(t0, near, far)
    hi = np.clip(t1, near, far)
    miss = hi <= lo
    lo = np.where(miss, near, lo)
    hi = np.where(miss, near + 1e-3, np.maximum(hi, lo + 1e-3))
    return lo, hi


def deltas_of(ts: np.ndarray) -> np.ndarray:
    """Consecutive inter-sample distances (one fewer than the sample count)."""
    return np.diff(ts, axis=-1)


def extinction_deltas(ts: np.ndarray) -> np.ndarray:
    """Per-sample segment lengths used by the quadrature.

    The first n-1 entries are the consecutive spacings; the last sample,
    which has no successor, reuses the final spacing.
    """
    d = np.diff(ts, axis=-1)
    return np.concatenate([d, d[..., -1:]], axis=-1)


def transmittances(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """tau_0 .. tau_N (one more than the sample count); tau_0 is one."""
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    acc = np.cumsum(sigma * delta, axis=-1)
    pad = np.zeros(acc.shape[:-1] + (1,))
    return np.exp(-np.concatenate([pad, acc], axis=-1))


def render_weights(sigma: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weights and the residual transmittance tau_N."""
    tau = transmittances(sigma, delta)
    alpha = -np.expm1(-np.asarray(sigma) * np.asarray(delta))
    return tau[..., :-1] * alpha, tau[..., -1]


def render(f: np.ndarray, sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Composite per-sample payload values f along the last sample axis."""
    w, _ = render_weights(sigma, delta)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == w.ndim:
        return (w * f).sum(axis=-1)
    return (w[..., None] * f).sum(axis=-2)


def weights_var(sigma: Var, delta: np.ndarray) -> tuple[Var, Var]:
    """Differentiable (weights, tau_N) for a (rays, samples) extinction batch."""
    a = ad.mul(sigma, ad.const(delta))
    acc = ad.cumsum(a, axis=-1)
    acc_excl = ad.sub(acc, a)
    tau = ad.vexp(ad.neg(acc_excl))
    alpha = ad.one_minus_exp_neg(a)
    w = ad.mul(tau, alpha)
    tau_n = ad.vexp(ad.neg(ad.narrow(acc, (Ellipsis, -1))))
    return w, tau_n


@dataclass
class RenderedBatch:
    """Everything one training step needs about a batch of rays."""

    weights: Var  # (B, S), differentiable through density
    tau_n: Var  # (B,)
    points: np.ndarray  # (B, S, 3) world-space sample positions
    inside: np.ndarray  # (B, S) cube mask
    model: FieldModel
    leaves: dict

    def _field_on_pixels(self, kind: str, rows: np.ndarray | None, which: str = "fast") -> tuple[Var, np.ndarray]:
        b, s, _ = self.points.shape
        if rows is None:
            pts = self.points.reshape(b * s, 3)
            n = b
        else:
            pts = self.points[rows].reshape(len(rows) * s, 3)
            n = len(rows)
        if kind == "instance":
            vals = self.model.instance_at(self.leaves, pts, which)
        elif kind == "semantic":
            vals = self.model.semantic_probs_at(self.leaves, pts)
        else:
            raise ValueError(kind)
        return ad.reshape(vals, (n, s, vals.value.shape[-1])), pts

    def _rows_weights(self, rows: np.ndarray | None, detach: bool) -> Var:
        w = self.weights if rows is None else ad.gather_rows(self.weights, rows)
        return ad.stop(w) if detach else w

    def render_color(self, dirs_enc: np.ndarray) -> Var:
        b, s, _ = self.points.shape
        pts = self.points.reshape(b * s, 3)
        enc = np.repeat(dirs_enc, s, axis=0)
        rgb = self.model.color_at(self.leaves, pts, enc)
        return ad.render_combine(self.weights, ad.reshape(rgb, (b, s, 3)))

    def render_instance(self, rows: np.ndarray | None = None, which: str = "fast") -> Var:
        """Instance embeddings; density is behind a stop-gradient barrier."""
        f, _ = self._field_on_pixels("instance", rows, which)
        return ad.render_combine(self._rows_weights(rows, detach=True), f)

    def render_semantic(self, rows: np.ndarray | None = None) -> tuple[Var, np.ndarray]:
        """Renormalized semantic probabilities plus the empty-ray mask.

        Probabilities rendered through the weights are divided by the weight
        sum on non-opaque rays; rays with (detached) weight sum below
        ``EMPTY_RAY_EPS`` fall back to a uniform distribution.
        """
        f, _ = self._field_on_pixels("semantic", rows)
        w = self._rows_weights(rows, detach=True)
        raw = ad.render_combine(w, f)
        wsum = w.value.sum(axis=1)
        empty = wsum < EMPTY_RAY_EPS
        denom = np.where(empty, 1.0, wsum)[:, None]
        probs = ad.mul(raw, ad.const(1.0 / denom))
        n_classes = raw.value.shape[1]
        fill = np.where(empty[:, None], 1.0 / n_classes, 0.0)
        keep = np.where(empty[:, None], 0.0, 1.0)
        return ad.add(ad.mul(probs, ad.const(keep)), ad.const(fill)), empty


def render_batch(
    model: FieldModel,
    leaves: dict,
    camera: Camera,
    uv: np.ndarray,
    n_samples: int,
    near: float,
    far: float,
    rng: np.random.Generator | None = None,
) -> tuple[RenderedBatch, np.ndarray]:
    """Sample rays for a pixel batch and compute differentiable weights.

    Returns the batch and the frequency-encoded ray directions (needed only
    by the color payload).  ``near``/``far`` may be per-ray arrays.
    """
    origins, dirs = camera.pixel_rays(uv)
    ts = sample_ts_batch(near, far, n_samples, len(uv), rng)
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    delta = extinction_deltas(ts)
    flat = pts.reshape(-1, 3)
    sigma = model.density_at(leaves, flat)
    sigma2 = ad.reshape(sigma, ts.shape)
    w, tau_n = weights_var(sigma2, delta)
    coords_inside = np.all(np.abs(flat) <= model.cfg.cube_half, axis=-1).reshape(ts.shape)
    enc = freq_encode(dirs, model.cfg.dir_enc_order)
    return RenderedBatch(w, tau_n, pts, coords_inside, model, leaves), enc


def render_pixel(model: FieldModel, camera: Camera, u: float, v: float, payload: str, n_samples: int, near: float, far: float) -> np.ndarray:
    """Render one pixel for one payload with uniform sampling (no gradients)."""
    if payload not in PAYLOADS:
        raise ValueError(f"unknown payload {payload!r}; expected one of {PAYLOADS}")
    leaves = model.leaves(frozenset())
    batch, enc = render_batch(model, leaves, camera, np.array([[u, v]]), n_samples, near, far)
    if payload == "color":
        return batch.render_color(enc).value[0]
    if payload == "semantic":
        probs, _ = batch.render_semantic()
        return probs.value[0]
    which = "fast" if payload == "instance-fast" else "slow"
    return batch.render_instance(which=which).value[0]


def render_frame_maps(
    model: FieldModel,
    camera: Camera,
    n_samples: int,
    near: float,
    far: float,
    chunk: int = 4096,
    want_color: bool = True,
) -> dict[str, np.ndarray]:
    """Full-frame rendered maps: instance embedding, semantic class, opacity, color.

    Used at evaluation time; everything runs without gradient tracking.
    """
    leaves = model.leaves(frozenset())
    uv = camera.pixel_grid()
    h, w = camera.height, camera.width
    emb = np.empty((h * w, model.cfg.embed_dim))
    sem = np.empty((h * w, model.cfg.semantic_classes))
    opa = np.empty(h * w)
    rgb = np.empty((h * w, 3)) if want_color else None
    for lo in range(0, len(uv), chunk):
        sl = slice(lo, min(lo + chunk, len(uv)))
        origins, dirs = camera.pixel_rays(uv[sl])
        span_lo, span_hi = ray_spans(origins, dirs, model.cfg.cube_half, near, far)
        batch, enc = render_batch(model, leaves, camera, uv[sl], n_samples, span_lo, span_hi)
        emb[sl] = batch.render_instance().value
        sem[sl], _ = _sem_values(batch)
        opa[sl] = batch.weights.value.sum(axis=1)
        if want_color:
            rgb[sl] = batch.render_color(enc).value
    out = {
        "embedding": emb.reshape(h, w, -1),
        "semantic_probs": sem.reshape(h, w, -1),
        "semantic": sem.argmax(axis=1).reshape(h, w),
        "opacity": opa.reshape(h, w),
    }
    if want_color:
        out["color"] = rgb.reshape(h, w, 3)
    return out


def _sem_values(batch: RenderedBatch) -> tuple[np.ndarray, np.ndarray]:
    probs, empty = batch.render_semantic()
    return probs.value, empty

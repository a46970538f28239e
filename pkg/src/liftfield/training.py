"""Optimization loop lifting per-view 2D labels into the 3D fields.

Training is phased: geometry and color learn from the start, the semantic
head joins after a warmup, and the instance embedding joins last, once the
density is good enough that rendered embeddings mean something.  At the
instant the instance phase begins the slow field is initialized as an exact
copy of the fast one, and from then on every optimizer step is followed by an
exponential-moving-average update of the slow parameters; the optimizer
itself never touches them.

Instance objectives are selected by a variant string so that the contrastive
formulation and its baselines train under identical schedules:

- ``sf+conc``       slow-fast contrastive plus concentration pull
- ``sf``            slow-fast contrastive alone
- ``contr``         vanilla contrastive on the fast field only
- ``contr+conc-fast``  vanilla contrastive plus a differentiable-centroid pull
- ``ae``            associative embedding (pull/push)
- ``margin``        hinged pairwise margin
- ``linassign``     per-view optimal assignment onto output channels

Every batch comes from a single image; images are visited round-robin and
each image's pixels are consumed as a reshuffled stream, so one seed fixes
the whole run bit for bit (given a fixed BLAS thread count).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .fields import (
    COLOR_GRID,
    COLOR_MLP,
    DENSITY_GRID,
    INSTANCE_FAST,
    INSTANCE_SLOW,
    SEMANTIC_MLP,
    FieldConfig,
    FieldModel,
    GradientError,
    ema_update,
    resize_model,
)
from .fileio import Dataset, write_train_log_bytes
from .losses import grad_relative_variance
from .rendering import ray_spans, render_batch
from .scenegen import scene_cube_half

VARIANTS = ("sf+conc", "sf", "contr", "contr+conc-fast", "ae", "margin", "linassign")

GRID_SLICES = (DENSITY_GRID, COLOR_GRID)


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 5000
    batch_size: int = 512
    n_samples: int = 32
    variant: str = "sf+conc"
    seed: int = 0
    lr_grid: float = 3e-2
    lr_mlp: float = 5e-4
    w_rgb: float = 1.0
    w_sem: float = 0.1
    w_inst: float = 0.1
    w_conc: float = 0.1
    gamma: float = 1.0
    margin: float = 1.0
    push_form: str = "literal"
    momentum: float = 0.9
    sem_start: float = 0.1
    inst_start: float = 0.4
    inst_rows: int = 224
    sem_rows: int = 256
    log_every: int = 50
    upsample_at: float = 0.0  # fraction of iters at which grids double; 0 disables
    upsample_to: int = 0  # target density resolution (color grid scales along)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (0.0 <= self.sem_start <= self.inst_start <= 1.0):
            raise ValueError("phase fractions must satisfy 0 <= sem_start <= inst_start <= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown training config keys: {sorted(bad)}")
        return cls(**d)

    @property
    def sem_start_iter(self) -> int:
        return int(math.floor(self.sem_start * self.iters))

    @property
    def inst_start_iter(self) -> int:
        return int(math.floor(self.inst_start * self.iters))


def default_field_config(dataset: Dataset, variant: str = "sf+conc", **overrides) -> FieldConfig:
    """Field sizes fitted to a dataset's recorded scene bounds.

    The embedding widens to 16 channels for the assignment variant, which
    classifies into channels instead of embedding into a metric space.
    """
    classes = int(max(int(dataset.semantic.max()) + 1, 2))
    base = dict(
        cube_half=scene_cube_half(dataset.meta),
        semantic_classes=classes,
        embed_dim=16 if variant == "linassign" else 3,
    )
    base.update(overrides)
    return FieldConfig(**base)


class Adam:
    """Flat-vector Adam with per-slice learning rates; untrainable entries stay put."""

    def __init__(self, store, lr_grid: float, lr_mlp: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(store.size)
        self.v = np.zeros(store.size)
        self.t = 0
        self.lr = np.empty(store.size)
        for name in store.slice_names:
            a, b = store._ranges[name]
            self.lr[a:b] = lr_grid if name in GRID_SLICES else lr_mlp
        self.mask = store.trainable_mask()

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        delta = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.store.data[self.mask] -= delta[self.mask]


@dataclass
class TrainResult:
    model: FieldModel
    log_rows: list[dict]
    field_cfg: FieldConfig
    train_cfg: TrainConfig


class _PixelStreams:
    """Per-image shuffled pixel index streams that reshuffle on exhaustion."""

    def __init__(self, n_images: int, n_pixels: int, rng: np.random.Generator):
        self.n_pixels = n_pixels
        self.rng = rng
        self.order = [rng.permutation(n_pixels) for _ in range(n_images)]
        self.cursor = [0] * n_images

    def take(self, image: int, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        got = 0
        while got < count:
            avail = self.n_pixels - self.cursor[image]
            if avail == 0:
                self.order[image] = self.rng.permutation(self.n_pixels)
                self.cursor[image] = 0
                avail = self.n_pixels
            n = min(avail, count - got)
            c = self.cursor[image]
            out[got : got + n] = self.order[image][c : c + n]
            self.cursor[image] = c + n
            got += n
        return out


def split_batch(pixels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random disjoint halves of a pixel batch; an odd leftover
    element goes to the first half."""
    pixels = np.asarray(pixels)
    if len(pixels) < 2:
        raise ValueError("need at least two pixels to split")
    perm = rng.permutation(len(pixels))
    cut = (len(pixels) + 1) // 2
    return pixels[perm[:cut]], pixels[perm[cut:]]


def _cap_segments(rows: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Drop rows of the rarest segments so at most k distinct labels remain."""
    lab = labels[rows]
    groups, gidx = losses._group_order(lab)
    if len(groups) <= k:
        return rows
    counts = np.bincount(gidx, minlength=len(groups))
    keep_groups = np.argsort(-counts, kind="stable")[:k]
    keep = np.isin(gidx, keep_groups)
    return rows[keep]


class Trainer:
    def __init__(self, dataset: Dataset, train_cfg: TrainConfig, field_cfg: FieldConfig | None = None):
        self.ds = dataset
        self.cfg = train_cfg
        self.field_cfg = field_cfg or default_field_config(dataset, train_cfg.variant)
        self.model = FieldModel.create(self.field_cfg, seed=train_cfg.seed)
        self.rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 40_551]))
        h, w = dataset.image_shape
        self.streams = _PixelStreams(dataset.n_views, h * w, self.rng)
        self.bounds = [dataset.meta.near_far(cam) for cam in dataset.cameras]
        self.uv_all = [cam.pixel_grid() for cam in dataset.cameras]
        self.opt = Adam(self.model.store, train_cfg.lr_grid, train_cfg.lr_mlp)
        self.log_rows: list[dict] = []
        self._slow_initialized = False

    # -- phase bookkeeping --------------------------------------------------

    def _active_slices(self, it: int) -> frozenset[str]:
        active = {DENSITY_GRID, COLOR_GRID, COLOR_MLP}
        if it >= self.cfg.sem_start_iter:
            active.add(SEMANTIC_MLP)
        if it >= self.cfg.inst_start_iter:
            active.add(INSTANCE_FAST)
        return frozenset(active)

    def _instance_rows(self, labels: np.ndarray) -> np.ndarray:
        """All foreground pixels of the batch plus background fill, shuffled."""
        want = min(self.cfg.inst_rows, len(labels))
        fg = np.flatnonzero(labels != 0)[:want]
        bg = np.flatnonzero(labels == 0)[: want - len(fg)]
        rows = np.concatenate([fg, bg])
        return self.rng.permutation(rows)

    # -- one optimization step ----------------------------------------------

    def step(self, it: int) -> dict:
        cfg = self.cfg
        img = it % self.ds.n_views
        cam = self.ds.cameras[img]
        near, far = self.bounds[img]
        pix = self.streams.take(img, cfg.batch_size)
        uv = self.uv_all[img][pix]
        rgb_target = self.ds.rgb[img].reshape(-1, 3)[pix]
        inst_labels = self.ds.instance_noisy[img].reshape(-1)[pix]
        sem_labels = self.ds.semantic[img].reshape(-1)[pix]

        sem_on = it >= cfg.sem_start_iter
        inst_on = it >= cfg.inst_start_iter
        if inst_on and not self._slow_initialized:
            self.model.store.copy_slice(INSTANCE_FAST, INSTANCE_SLOW)
            self._slow_initialized = True

        leaves = self.model.leaves(self._active_slices(it))
        origins, dirs = cam.pixel_rays(uv)
        lo, hi = ray_spans(origins, dirs, self.field_cfg.cube_half, near, far)
        batch, enc = render_batch(self.model, leaves, cam, uv, cfg.n_samples, lo, hi, rng=self.rng)

        loss_rgb = losses.photometric_loss(batch.render_color(enc), rgb_target)
        total = ad.mul(loss_rgb.var, ad.const(cfg.w_rgb))

        loss_sem = None
        if sem_on:
            rows = np.arange(min(cfg.sem_rows, len(pix)))
            probs, _ = batch.render_semantic(rows=rows)
            loss_sem = losses.semantic_loss(probs, sem_labels[rows])
            total = ad.add(total, ad.mul(loss_sem.var, ad.const(cfg.w_sem)))

        loss_inst = None
        if inst_on:
            loss_inst, inst_extra = self._instance_objective(batch, inst_labels)
            total = ad.add(total, ad.mul(loss_inst.var, ad.const(cfg.w_inst)))
            if inst_extra is not None:
                total = ad.add(total, ad.mul(inst_extra.var, ad.const(cfg.w_conc)))

        if not np.isfinite(total.value):
            raise GradientError(f"training diverged at iteration {it}: loss is {total.value!r}")

        grads = ad.backward(total, wanted=set(leaves.values()))
        flat = np.zeros(self.model.store.size)
        for p in self.model.store._params:
            g = grads.get(leaves[(p.slice_name, p.name)])
            if g is not None:
                n = int(np.prod(p.shape))
                flat[p.offset : p.offset + n] = np.asarray(g).reshape(-1)
        bad = np.flatnonzero(~np.isfinite(flat))
        if len(bad):
            slice_name = self.model.store.slice_of_index(int(bad[0]))
            raise GradientError(f"non-finite gradient in slice {slice_name!r} at iteration {it}")

        rvar = float("nan")
        if inst_on and cfg.w_inst != 0.0:
            a, b = self.model.store._ranges[INSTANCE_FAST]
            rvar = grad_relative_variance(flat[a:b] / cfg.w_inst)

        self.opt.step(flat)
        if inst_on:
            ema_update(self.model.store, cfg.momentum)

        return {
            "iter": it,
            "loss_rgb": float(loss_rgb.value),
            "loss_sem": float(loss_sem.value) if loss_sem else float("nan"),
            "loss_inst": float(loss_inst.value) if loss_inst else float("nan"),
            "skipped_frac": float(loss_inst.skipped_fraction) if loss_inst else float("nan"),
            "grad_rvar": rvar,
        }

    def _instance_objective(self, batch, labels: np.ndarray):
        cfg = self.cfg
        rows = self._instance_rows(labels)
        if cfg.variant in ("sf+conc", "sf"):
            fast_rows, slow_rows = split_batch(rows, self.rng)
            fast = batch.render_instance(rows=fast_rows, which="fast")
            slow = batch.render_instance(rows=slow_rows, which="slow")
            main = losses.slowfast_loss(fast, labels[fast_rows], slow, labels[slow_rows], gamma=cfg.gamma)
            if cfg.variant == "sf":
                return main, None
            return main, losses.concentration_loss(fast, labels[fast_rows], slow, labels[slow_rows])
        if cfg.variant == "contr":
            emb = batch.render_instance(rows=rows)
            return losses.contrastive_loss(emb, labels[rows], gamma=cfg.gamma), None
        if cfg.variant == "contr+conc-fast":
            emb = batch.render_instance(rows=rows)
            main = losses.contrastive_loss(emb, labels[rows], gamma=cfg.gamma)
            own_rows, cen_rows = split_batch(np.arange(len(rows)), self.rng)
            conc = losses.concentration_loss_fast(emb, labels[rows], anchor_rows=own_rows, centroid_rows=cen_rows)
            return main, conc
        if cfg.variant == "ae":
            emb = batch.render_instance(rows=rows)
            return losses.ae_loss(emb, labels[rows], push=cfg.push_form), None
        if cfg.variant == "margin":
            emb = batch.render_instance(rows=rows)
            return losses.margin_loss(emb, labels[rows], eps=cfg.margin), None
        # linassign: embedding channels act as logits over output slots.
        rows = _cap_segments(rows, labels, self.model.cfg.embed_dim)
        emb = batch.render_instance(rows=rows)
        probs = ad.softmax(emb, axis=1)
        main, _ = losses.linear_assignment_loss(probs, labels[rows])
        return main, None

    # -- full run -------------------------------------------------------------

    def run(self, log_path=None, progress=None) -> TrainResult:
        cfg = self.cfg
        for it in range(cfg.iters):
            if cfg.upsample_to and it == int(cfg.upsample_at * cfg.iters) and cfg.upsample_at > 0:
                self._upsample(cfg.upsample_to)
            row = self.step(it)
            if it % cfg.log_every == 0 or it == cfg.iters - 1:
                self.log_rows.append(row)
                if progress is not None:
                    progress(row)
        if log_path is not None:
            Path(log_path).write_bytes(write_train_log_bytes(self.log_rows))
        return TrainResult(self.model, self.log_rows, self.field_cfg, cfg)

    def _upsample(self, density_res: int) -> None:
        """Double grid detail mid-run; optimizer moments restart from zero."""
        scale = density_res / self.model.cfg.density_res
        color_res = int(round(self.model.cfg.color_res * scale))
        self.model = resize_model(self.model, density_res, color_res, seed=self.cfg.seed)
        self.field_cfg = self.model.cfg
        self.opt = Adam(self.model.store, self.cfg.lr_grid, self.cfg.lr_mlp)


def train(dataset: Dataset, train_cfg: TrainConfig, field_cfg: FieldConfig | None = None, log_path=None, progress=None) -> TrainResult:
    """One-call training entry point."""
    return Trainer(dataset, train_cfg, field_cfg).run(log_path=log_path, progress=progress)

"""Neural scene fields over a shared flat parameter store.

The model is a density voxel grid (softplus-activated), a color field (feature
grid plus a small MLP conditioned on a frequency-encoded view direction), a
semantic logit MLP, and two instance-embedding MLPs: a trainable "fast" head
and a "slow" twin that is only ever written by exponential moving average.
All parameters live in one float64 vector partitioned into named slices so
that optimizers, checkpoints and gradient diagnostics can address them
uniformly.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

DENSITY_GRID = "density-grid"
COLOR_GRID = "color-grid"
COLOR_MLP = "color-mlp"
INSTANCE_FAST = "instance-fast-mlp"
INSTANCE_SLOW = "instance-slow-mlp"
SEMANTIC_MLP = "semantic-mlp"

SLICE_ORDER = (DENSITY_GRID, COLOR_GRID, COLOR_MLP, INSTANCE_FAST, INSTANCE_SLOW, SEMANTIC_MLP)

GRID_SLICES = frozenset({DENSITY_GRID, COLOR_GRID})


class GradientError(RuntimeError):
    """Raised when a gradient turns out non-finite."""


@dataclass(frozen=True)
class FieldConfig:
    """Dimensions of every field; desk-scale defaults."""

    cube_half: float = 2.0
    density_res: int = 64
    color_res: int = 32
    color_channels: int = 8
    dir_enc_order: int = 0
    color_hidden: int = 64
    color_layers: int = 3
    embed_dim: int = 3
    instance_hidden: int = 64
    instance_layers: int = 5
    semantic_classes: int = 2
    semantic_hidden: int = 32
    semantic_layers: int = 5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown field-config keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class _Param:
    slice_name: str
    name: str
    offset: int
    shape: tuple


class ParamStore:
    """Flat float64 parameter vector with named, contiguous slices.

    Every parameter belongs to exactly one slice; the slow instance slice is
    never trainable (it is written only by the EMA update).
    """

    def __init__(self, params: list[tuple[str, str, np.ndarray]]):
        self._params: list[_Param] = []
        self._by_key: dict[tuple[str, str], _Param] = {}
        sizes = sum(int(np.prod(p[2].shape)) for p in params)
        self.data = np.empty(sizes, dtype=np.float64)
        offset = 0
        slice_starts: dict[str, int] = {}
        slice_stops: dict[str, int] = {}
        last_slice = None
        for slice_name, name, init in params:
            if slice_name != last_slice and slice_name in slice_starts:
                raise ValueError(f"slice {slice_name!r} is not contiguous in the layout")
            last_slice = slice_name
            n = int(np.prod(init.shape))
            self.data[offset : offset + n] = np.asarray(init, dtype=np.float64).ravel()
            p = _Param(slice_name, name, offset, tuple(init.shape))
            self._params.append(p)
            self._by_key[(slice_name, name)] = p
            slice_starts.setdefault(slice_name, offset)
            slice_stops[slice_name] = offset + n
            offset += n
        self.slice_names = tuple(dict.fromkeys(p.slice_name for p in self._params))
        self._ranges = {s: (slice_starts[s], slice_stops[s]) for s in self.slice_names}

    @property
    def size(self) -> int:
        return self.data.size

    def slice_range(self, slice_name: str) -> tuple[int, int]:
        return self._ranges[slice_name]

    def slice_values(self, slice_name: str) -> np.ndarray:
        a, b = self._ranges[slice_name]
        return self.data[a:b]

    def view(self, slice_name: str, name: str) -> np.ndarray:
        p = self._by_key[(slice_name, name)]
        n = int(np.prod(p.shape))
        return self.data[p.offset : p.offset + n].reshape(p.shape)

    def trainable_slices(self) -> tuple[str, ...]:
        return tuple(s for s in self.slice_names if s != INSTANCE_SLOW)

    def trainable_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        if INSTANCE_SLOW in self._ranges:
            a, b = self._ranges[INSTANCE_SLOW]
            mask[a:b] = False
        return mask

    def params_in(self, slice_name: str) -> list[tuple[str, np.ndarray]]:
        return [(p.name, self.view(p.slice_name, p.name)) for p in self._params if p.slice_name == slice_name]

    def copy_slice(self, src: str, dst: str) -> None:
        a, b = self._ranges[src]
        c, d = self._ranges[dst]
        if b - a != d - c:
            raise ValueError(f"slice size mismatch: {src} has {b - a}, {dst} has {d - c}")
        self.data[c:d] = self.data[a:b]

    def slice_of_index(self, i: int) -> str:
        for s, (a, b) in self._ranges.items():
            if a <= i < b:
                return s
        raise IndexError(i)


def ema_update(store: ParamStore, momentum: float = 0.9) -> None:
    """slow <- momentum * slow + (1 - momentum) * fast, in place."""
    fast = store.slice_values(INSTANCE_FAST)
    slow = store.slice_values(INSTANCE_SLOW)
    slow *= momentum
    slow += (1.0 - momentum) * fast


def freq_encode(d: np.ndarray, order: int) -> np.ndarray:
    """Concatenate d with sin/cos of 2^k * pi * d for k < order.

    Output width is 3 + 6 * order; order zero returns d unchanged.
    """
    d = np.asarray(d, dtype=np.float64)
    if order == 0:
        return d
    parts = [d]
    for k in range(order):
        s = (2.0**k) * np.pi * d
        parts.append(np.sin(s))
    for k in range(order):
        s = (2.0**k) * np.pi * d
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=-1)


def _mlp_layout(prefix: str, dims: list[int], rng: np.random.Generator, small_last: bool = False):
    """Kaiming-uniform weights, zero biases; optionally a near-zero final layer.

    The embedding head's final layer is scaled way down so all embeddings
    start in one tight clump, but not exactly at one point: coincident
    embeddings are a stationary point of every distance-based loss (the
    pairwise-distance gradient 2(a - b) vanishes), so an exact zero init
    could never start learning.
    """
    out = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        bound = np.sqrt(6.0 / fan_in)
        if small_last and last:
            bound *= 1e-2
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        out.append((f"{prefix}w{i}", w))
        out.append((f"{prefix}b{i}", np.zeros(fan_out)))
    return out


def _mlp_dims(in_dim: int, hidden: int, layers: int, out_dim: int) -> list[int]:
    if layers < 1:
        raise ValueError("an MLP needs at least one layer")
    if layers == 1:
        return [in_dim, out_dim]
    return [in_dim] + [hidden] * (layers - 1) + [out_dim]


class FieldModel:
    """Bundles a :class:`FieldConfig` with its parameter store and evaluators."""

    def __init__(self, cfg: FieldConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: FieldConfig, seed: int = 0) -> "FieldModel":
        rng = np.random.default_rng(seed)
        layout: list[tuple[str, str, np.ndarray]] = []
        r = cfg.density_res
        # Near-empty start: softplus(-4) ~= 0.018, so rays begin transparent
        # and density grows only where the photometric loss demands it.  A
        # denser start settles into translucent haze that the view-independent
        # color field can camouflage, starving the carve gradient.
        layout.append((DENSITY_GRID, "values", np.full((r, r, r), -4.0)))
        rc = cfg.color_res
        layout.append((COLOR_GRID, "values", rng.uniform(-0.1, 0.1, size=(rc, rc, rc, cfg.color_channels))))

        color_in = cfg.color_channels + 3 + 6 * cfg.dir_enc_order
        for name, w in _mlp_layout("", _mlp_dims(color_in, cfg.color_hidden, cfg.color_layers, 3), rng):
            layout.append((COLOR_MLP, name, w))
        inst_dims = _mlp_dims(3, cfg.instance_hidden, cfg.instance_layers, cfg.embed_dim)
        fast = _mlp_layout("", inst_dims, rng, small_last=True)
        for name, w in fast:
            layout.append((INSTANCE_FAST, name, w))
        for name, w in fast:
            layout.append((INSTANCE_SLOW, name, w.copy()))
        for name, w in _mlp_layout("", _mlp_dims(3, cfg.semantic_hidden, cfg.semantic_layers, cfg.semantic_classes), rng):
            layout.append((SEMANTIC_MLP, name, w))
        return cls(cfg, ParamStore(layout))

    # -- graph-building helpers ------------------------------------------------

    def leaves(self, grad_slices: frozenset[str] | None = None) -> dict[tuple[str, str], Var]:
        """One leaf Var per parameter; only ``grad_slices`` members require grad.

        The slow instance slice never requires gradient regardless of the
        request, which is what makes it a hard stop-gradient barrier.
        """
        out = {}
        for p in self.store._params:
            req = (grad_slices is None or p.slice_name in grad_slices) and p.slice_name != INSTANCE_SLOW
            out[(p.slice_name, p.name)] = ad.leaf(self.store.view(p.slice_name, p.name), requires=req)
        return out

    def _grid_coords(self, pts: np.ndarray, res: int) -> tuple[np.ndarray, np.ndarray]:
        h = self.cfg.cube_half
        inside = np.all(np.abs(pts) <= h, axis=-1)
        coords = (pts + h) * ((res - 1) / (2.0 * h))
        return coords, inside

    def density_at(self, leaves, pts: np.ndarray) -> Var:
        """Softplus density at world points; zero outside the cube."""
        coords, inside = self._grid_coords(pts, self.cfg.density_res)
        raw = ad.trilerp(leaves[(DENSITY_GRID, "values")], coords, inside)
        return ad.mul(ad.softplus(raw), ad.const(inside.astype(np.float64)))

    def color_features_at(self, leaves, pts: np.ndarray) -> Var:
        coords, inside = self._grid_coords(pts, self.cfg.color_res)
        return ad.trilerp(leaves[(COLOR_GRID, "values")], coords, inside)

    def _mlp(self, leaves, slice_name: str, x: Var, n_layers: int) -> Var:
        h = x
        for i in range(n_layers):
            h = ad.linear(h, leaves[(slice_name, f"w{i}")], leaves[(slice_name, f"b{i}")])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def color_at(self, leaves, pts: np.ndarray, dirs_enc: np.ndarray) -> Var:
        """RGB in [0, 1] at points viewed along (pre-encoded) directions."""
        feats = self.color_features_at(leaves, pts)
        x = ad.concat([feats, ad.const(dirs_enc)], axis=1)
        return ad.sigmoid(self._mlp(leaves, COLOR_MLP, x, self.cfg.color_layers))

    def instance_at(self, leaves, pts: np.ndarray, which: str = "fast") -> Var:
        slice_name = INSTANCE_FAST if which == "fast" else INSTANCE_SLOW
        x = ad.const(pts)
        return self._mlp(leaves, slice_name, x, self.cfg.instance_layers)

    def semantic_logits_at(self, leaves, pts: np.ndarray) -> Var:
        return self._mlp(leaves, SEMANTIC_MLP, ad.const(pts), self.cfg.semantic_layers)

    def semantic_probs_at(self, leaves, pts: np.ndarray) -> Var:
        return ad.softmax(self.semantic_logits_at(leaves, pts), axis=1)

    # -- plain numpy evaluation ------------------------------------------------

    def eval_density(self, x: np.ndarray) -> np.ndarray:
        x2, squeeze = _atleast_2d(x)
        out = self.density_at(self.leaves(frozenset()), x2).value
        return out[0] if squeeze else out

    def eval_color(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        x2, squeeze = _atleast_2d(x)
        d2, _ = _atleast_2d(d)
        d2 = np.broadcast_to(d2, x2.shape)
        norms = np.linalg.norm(d2, axis=-1, keepdims=True)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            warnings.warn("view directions were not unit length; normalizing", stacklevel=2)
            d2 = d2 / norms
        enc = freq_encode(d2, self.cfg.dir_enc_order)
        out = self.color_at(self.leaves(frozenset()), x2, enc).value
        return out[0] if squeeze else out

    def eval_instance(self, x: np.ndarray, which: str = "fast") -> np.ndarray:
        x2, squeeze = _atleast_2d(x)
        out = self.instance_at(self.leaves(frozenset()), x2, which).value
        return out[0] if squeeze else out

    def eval_semantic(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities (softmax of the logits); rows sum to one."""
        x2, squeeze = _atleast_2d(x)
        out = self.semantic_probs_at(self.leaves(frozenset()), x2).value
        return out[0] if squeeze else out


def _atleast_2d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def upsample_grid(values: np.ndarray, new_res: int) -> np.ndarray:
    """Trilinearly resample a voxel grid to a new per-axis resolution."""
    old = values.shape[0]
    if new_res == old:
        return values.copy()
    t = np.linspace(0.0, old - 1.0, new_res)
    i0 = np.minimum(t.astype(np.int64), old - 2)
    f = t - i0

    def lerp_axis(a: np.ndarray, axis: int) -> np.ndarray:
        lo = np.take(a, i0, axis=axis)
        hi = np.take(a, i0 + 1, axis=axis)
        shape = [1] * a.ndim
        shape[axis] = new_res
        ff = f.reshape(shape)
        return lo * (1.0 - ff) + hi * ff

    out = values
    for axis in range(3):
        out = lerp_axis(out, axis)
    return out


def resize_model(model: FieldModel, density_res: int, color_res: int, seed: int = 0) -> FieldModel:
    """New model with resampled grids; MLP parameters are copied over."""
    cfg = dataclasses.replace(model.cfg, density_res=density_res, color_res=color_res)
    fresh = FieldModel.create(cfg, seed=seed)
    fresh.store.view(DENSITY_GRID, "values")[...] = upsample_grid(model.store.view(DENSITY_GRID, "values"), density_res)
    fresh.store.view(COLOR_GRID, "values")[...] = upsample_grid(model.store.view(COLOR_GRID, "values"), color_res)
    for slice_name in (COLOR_MLP, INSTANCE_FAST, INSTANCE_SLOW, SEMANTIC_MLP):
        for name, view in fresh.store.params_in(slice_name):
            view[...] = model.store.view(slice_name, name)
    return fresh

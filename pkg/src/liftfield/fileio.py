"""File formats: images, label maps, depth maps, checkpoints, JSON sidecars.

Every parser is total: malformed input of any kind raises
:class:`FileFormatError` with a human-readable reason, never an uncaught
exception.  Writers emit one canonical byte layout per format so that a
write/parse/write cycle is bit-exact.

Formats:
  - rgb/NNNN.ppm          binary P6, maxval 255
  - instance*/NNNN.pgm    binary P5, maxval 65535, big-endian 16-bit IDs
  - semantic/NNNN.pgm     same PGM layout
  - depth/NNNN.f32        magic DEPTHF32, u32 width, u32 height, f32 LE pixels
  - checkpoint            magic LIFTCKPT, u32 version, then per slice:
                          u32 name length, name, u32 element count, f32 LE
  - cameras.json          scene bounds plus per-camera intrinsics/pose
  - centroid cache        JSON mapping semantic class -> [{id, centroid}]
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import ParamStore
from .rendering import Camera

CHECKPOINT_MAGIC = b"LIFTCKPT"
CHECKPOINT_VERSION = 1
DEPTH_MAGIC = b"DEPTHF32"

TRAIN_LOG_HEADER = "iter,loss_rgb,loss_sem,loss_inst,skipped_frac,grad_rvar"


class FileFormatError(ValueError):
    """A file or byte string does not conform to its declared format."""


def _fail(fmt: str, reason: str) -> "FileFormatError":
    return FileFormatError(f"malformed {fmt}: {reason}")


# ---------------------------------------------------------------------------
# Netpbm images


def _scan_pnm_header(data: bytes, fmt: str, n_fields: int) -> tuple[list[int], int]:
    """Parse whitespace/comment-separated header integers after the magic."""
    pos = 2
    fields: list[int] = []
    while len(fields) < n_fields:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise _fail(fmt, "unterminated comment in header")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise _fail(fmt, "expected integer in header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise _fail(fmt, "missing whitespace after header")
    return fields, pos + 1


def write_ppm_bytes(image: np.ndarray) -> bytes:
    """8-bit binary PPM from a float image in [0, 1] or a uint8 array."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def parse_ppm_bytes(data: bytes) -> np.ndarray:
    """Binary P6 image as float64 in [0, 1]."""
    try:
        if data[:2] != b"P6":
            raise _fail("ppm", "bad magic, expected P6")
        (w, h, maxval), pos = _scan_pnm_header(data, "ppm", 3)
        if w <= 0 or h <= 0:
            raise _fail("ppm", f"bad dimensions {w}x{h}")
        if maxval != 255:
            raise _fail("ppm", f"unsupported maxval {maxval}")
        need = w * h * 3
        raster = data[pos : pos + need]
        if len(raster) != need:
            raise _fail("ppm", f"raster truncated: need {need} bytes, got {len(raster)}")
        return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
    except FileFormatError:
        raise
    except Exception as e:  # malformed in a way we did not anticipate
        raise _fail("ppm", str(e)) from e


def write_pgm_bytes(labels: np.ndarray) -> bytes:
    """16-bit binary PGM (maxval 65535, big-endian samples)."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"expected 2D label map, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("label values outside the 16-bit range")
    h, w = arr.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + arr.astype(">u2").tobytes()


def parse_pgm_bytes(data: bytes) -> np.ndarray:
    """Binary P5 map as int64; 2-byte big-endian samples when maxval > 255."""
    try:
        if data[:2] != b"P5":
            raise _fail("pgm", "bad magic, expected P5")
        (w, h, maxval), pos = _scan_pnm_header(data, "pgm", 3)
        if w <= 0 or h <= 0:
            raise _fail("pgm", f"bad dimensions {w}x{h}")
        if not 0 < maxval < 65536:
            raise _fail("pgm", f"bad maxval {maxval}")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        raster = data[pos : pos + need]
        if len(raster) != need:
            raise _fail("pgm", f"raster truncated: need {need} bytes, got {len(raster)}")
        return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64)
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("pgm", str(e)) from e


# ---------------------------------------------------------------------------
# Depth maps


def write_depth_bytes(depth: np.ndarray) -> bytes:
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected 2D depth map, got shape {arr.shape}")
    h, w = arr.shape
    return DEPTH_MAGIC + struct.pack("<II", w, h) + arr.astype("<f4").tobytes()


def parse_depth_bytes(data: bytes) -> np.ndarray:
    try:
        if data[:8] != DEPTH_MAGIC:
            raise _fail("depth", "bad magic, expected DEPTHF32")
        if len(data) < 16:
            raise _fail("depth", "header truncated")
        w, h = struct.unpack("<II", data[8:16])
        if w <= 0 or h <= 0 or w * h > 10**9:
            raise _fail("depth", f"bad dimensions {w}x{h}")
        need = 16 + 4 * w * h
        if len(data) != need:
            raise _fail("depth", f"expected {need} bytes total, got {len(data)}")
        return np.frombuffer(data[16:], dtype="<f4").reshape(h, w).astype(np.float64)
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("depth", str(e)) from e


# ---------------------------------------------------------------------------
# Checkpoints


def write_checkpoint_bytes(slices: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, values in slices:
        nb = name.encode("utf-8")
        vals = np.asarray(values, dtype="<f4").ravel()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", vals.size))
        parts.append(vals.tobytes())
    return b"".join(parts)


def parse_checkpoint_bytes(data: bytes) -> dict[str, np.ndarray]:
    """Slice name -> float32 values; names must be unique."""
    try:
        if data[:8] != CHECKPOINT_MAGIC:
            raise _fail("checkpoint", "bad magic, expected LIFTCKPT")
        if len(data) < 12:
            raise _fail("checkpoint", "header truncated")
        (version,) = struct.unpack("<I", data[8:12])
        if version != CHECKPOINT_VERSION:
            raise _fail("checkpoint", f"unsupported version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        while pos < len(data):
            if pos + 4 > len(data):
                raise _fail("checkpoint", "slice name length truncated")
            (nlen,) = struct.unpack("<I", data[pos : pos + 4])
            pos += 4
            if nlen == 0 or nlen > 4096 or pos + nlen > len(data):
                raise _fail("checkpoint", "bad slice name")
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            if pos + 4 > len(data):
                raise _fail("checkpoint", "element count truncated")
            (count,) = struct.unpack("<I", data[pos : pos + 4])
            pos += 4
            if pos + 4 * count > len(data):
                raise _fail("checkpoint", f"slice {name!r} values truncated")
            out_arr = np.frombuffer(data[pos : pos + 4 * count], dtype="<f4").copy()
            pos += 4 * count
            if name in out:
                raise _fail("checkpoint", f"duplicate slice {name!r}")
            out[name] = out_arr
        return out
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("checkpoint", str(e)) from e


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    slices = [(name, store.slice_values(name)) for name in store.slice_names]
    Path(path).write_bytes(write_checkpoint_bytes(slices))


def load_checkpoint_into(store: ParamStore, path: str | Path) -> None:
    """Fill a store from a checkpoint; slice names and sizes must line up."""
    slices = parse_checkpoint_bytes(Path(path).read_bytes())
    expected = set(store.slice_names)
    got = set(slices)
    if expected != got:
        raise FileFormatError(f"checkpoint slices {sorted(got)} do not match model slices {sorted(expected)}")
    for name in store.slice_names:
        view = store.slice_values(name)
        if slices[name].size != view.size:
            raise FileFormatError(f"slice {name!r} has {slices[name].size} values, model expects {view.size}")
        view[...] = slices[name].astype(np.float64)


# ---------------------------------------------------------------------------
# cameras.json and scene metadata


@dataclass
class SceneMeta:
    center: np.ndarray
    radius: float
    min_object_radius: float

    def near_far(self, camera: Camera, margin: float = 1.15) -> tuple[float, float]:
        dist = float(np.linalg.norm(camera.translation - self.center))
        span = self.radius * margin
        near = max(dist - span, 0.05 * dist)
        return near, dist + span


def write_cameras_json_bytes(cameras: list[Camera], meta: SceneMeta) -> bytes:
    doc = {
        "scene_center": [float(x) for x in meta.center],
        "scene_radius": float(meta.radius),
        "min_object_radius": float(meta.min_object_radius),
        "cameras": [
            {
                "rotation": [[float(x) for x in row] for row in c.rotation],
                "translation": [float(x) for x in c.translation],
                "focal": float(c.focal),
                "cx": float(c.cx),
                "cy": float(c.cy),
                "width": int(c.width),
                "height": int(c.height),
            }
            for c in cameras
        ],
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def parse_cameras_json_bytes(data: bytes) -> tuple[list[Camera], SceneMeta]:
    try:
        doc = json.loads(data.decode("utf-8"))
        if not isinstance(doc, dict):
            raise _fail("cameras.json", "top level must be an object")
        center = np.asarray(doc["scene_center"], dtype=np.float64)
        if center.shape != (3,):
            raise _fail("cameras.json", "scene_center must have 3 components")
        radius = float(doc["scene_radius"])
        min_r = float(doc.get("min_object_radius", radius))
        if not (radius > 0 and math.isfinite(radius)):
            raise _fail("cameras.json", "scene_radius must be positive and finite")
        cams = []
        entries = doc["cameras"]
        if not isinstance(entries, list) or not entries:
            raise _fail("cameras.json", "cameras must be a non-empty list")
        for i, c in enumerate(entries):
            cams.append(
                Camera(
                    rotation=np.asarray(c["rotation"], dtype=np.float64),
                    translation=np.asarray(c["translation"], dtype=np.float64),
                    focal=float(c["focal"]),
                    cx=float(c["cx"]),
                    cy=float(c["cy"]),
                    width=int(c["width"]),
                    height=int(c["height"]),
                )
            )
            if cams[-1].width <= 0 or cams[-1].height <= 0:
                raise _fail("cameras.json", f"camera {i} has non-positive image size")
        return cams, SceneMeta(center, radius, min_r)
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("cameras.json", str(e)) from e


# ---------------------------------------------------------------------------
# Centroid cache


def write_centroids_bytes(cache: dict[int, list[tuple[int, np.ndarray]]]) -> bytes:
    doc = {
        "classes": {
            str(cls): [{"id": int(gid), "centroid": [float(x) for x in cen]} for gid, cen in entries]
            for cls, entries in cache.items()
        }
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def parse_centroids_bytes(data: bytes) -> dict[int, list[tuple[int, np.ndarray]]]:
    try:
        doc = json.loads(data.decode("utf-8"))
        classes = doc["classes"]
        if not isinstance(classes, dict):
            raise _fail("centroid cache", "classes must be an object")
        out: dict[int, list[tuple[int, np.ndarray]]] = {}
        dim = None
        for cls, entries in classes.items():
            rows = []
            for e in entries:
                cen = np.asarray(e["centroid"], dtype=np.float64)
                if cen.ndim != 1 or not np.isfinite(cen).all():
                    raise _fail("centroid cache", "centroid must be a finite vector")
                if dim is None:
                    dim = cen.size
                elif cen.size != dim:
                    raise _fail("centroid cache", "centroid dimensions disagree")
                rows.append((int(e["id"]), cen))
            out[int(cls)] = rows
        return out
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("centroid cache", str(e)) from e


# ---------------------------------------------------------------------------
# Flat JSON config


def parse_config_bytes(data: bytes) -> dict:
    """One-level JSON object with scalar values."""
    try:
        doc = json.loads(data.decode("utf-8"))
        if not isinstance(doc, dict):
            raise _fail("config", "top level must be an object")
        for k, v in doc.items():
            if not isinstance(v, (int, float, str, bool)):
                raise _fail("config", f"key {k!r} must map to a scalar")
        return doc
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("config", str(e)) from e


# ---------------------------------------------------------------------------
# Training log


def write_train_log_bytes(rows: list[dict]) -> bytes:
    lines = [TRAIN_LOG_HEADER]
    for r in rows:
        lines.append(
            "%d,%s,%s,%s,%s,%s"
            % (
                r["iter"],
                _fmt(r["loss_rgb"]),
                _fmt(r["loss_sem"]),
                _fmt(r["loss_inst"]),
                _fmt(r["skipped_frac"]),
                _fmt(r["grad_rvar"]),
            )
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def parse_train_log_bytes(data: bytes) -> list[dict]:
    try:
        text = data.decode("utf-8")
        lines = [ln for ln in text.splitlines() if ln]
        if not lines or lines[0] != TRAIN_LOG_HEADER:
            raise _fail("train log", "bad or missing header")
        keys = TRAIN_LOG_HEADER.split(",")
        out = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(keys):
                raise _fail("train log", f"row has {len(parts)} fields, expected {len(keys)}")
            row = {"iter": int(parts[0])}
            for k, v in zip(keys[1:], parts[1:]):
                row[k] = float(v)
            out.append(row)
        return out
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("train log", str(e)) from e


# ---------------------------------------------------------------------------
# Dataset directories


@dataclass
class Dataset:
    """In-memory multi-view dataset with per-view label maps."""

    cameras: list[Camera]
    meta: SceneMeta
    rgb: np.ndarray  # (M, H, W, 3) float64 in [0, 1]
    instance_gt: np.ndarray  # (M, H, W) int64, 0 = background
    instance_noisy: np.ndarray
    semantic: np.ndarray  # (M, H, W) int64, 0 = stuff/background
    depth: np.ndarray  # (M, H, W) float64, +inf on ray miss

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


_SUBDIRS = ("rgb", "instance_gt", "instance_noisy", "semantic", "depth")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    root = Path(path)
    for sub in _SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "cameras.json").write_bytes(write_cameras_json_bytes(ds.cameras, ds.meta))
    for i in range(ds.n_views):
        stem = f"{i:04d}"
        (root / "rgb" / f"{stem}.ppm").write_bytes(write_ppm_bytes(ds.rgb[i]))
        (root / "instance_gt" / f"{stem}.pgm").write_bytes(write_pgm_bytes(ds.instance_gt[i]))
        (root / "instance_noisy" / f"{stem}.pgm").write_bytes(write_pgm_bytes(ds.instance_noisy[i]))
        (root / "semantic" / f"{stem}.pgm").write_bytes(write_pgm_bytes(ds.semantic[i]))
        (root / "depth" / f"{stem}.f32").write_bytes(write_depth_bytes(np.asarray(ds.depth[i], dtype=np.float32)))


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise FileFormatError(f"no cameras.json under {root}")
    cameras, meta = parse_cameras_json_bytes(cam_file.read_bytes())
    n = len(cameras)
    h, w = cameras[0].height, cameras[0].width

    def load_series(sub: str, suffix: str, parser, shape) -> np.ndarray:
        out = []
        for i in range(n):
            p = root / sub / f"{i:04d}{suffix}"
            if not p.is_file():
                raise FileFormatError(f"missing {p}")
            arr = parser(p.read_bytes())
            if arr.shape[:2] != shape:
                raise FileFormatError(f"{p} has shape {arr.shape[:2]}, cameras.json says {shape}")
            out.append(arr)
        return np.stack(out)

    rgb = load_series("rgb", ".ppm", parse_ppm_bytes, (h, w))
    inst_gt = load_series("instance_gt", ".pgm", parse_pgm_bytes, (h, w))
    inst_noisy = load_series("instance_noisy", ".pgm", parse_pgm_bytes, (h, w))
    semantic = load_series("semantic", ".pgm", parse_pgm_bytes, (h, w))
    depth = load_series("depth", ".f32", parse_depth_bytes, (h, w))
    return Dataset(cameras, meta, rgb, inst_gt, inst_noisy, semantic, depth)


def load_label_dir(path: str | Path, prefer: tuple[str, ...] = ("instance", "instance_gt")) -> list[np.ndarray]:
    """Instance maps from a prediction or dataset directory.

    A directory holding NNNN.pgm files directly is used as-is; otherwise the
    first existing subdirectory from ``prefer`` wins.  Frames load in index
    order.
    """
    root = Path(path)
    own = sorted(root.glob("[0-9][0-9][0-9][0-9].pgm"))
    if own:
        return [parse_pgm_bytes(f.read_bytes()) for f in own]
    for sub in prefer:
        d = root / sub
        if d.is_dir():
            files = sorted(d.glob("[0-9][0-9][0-9][0-9].pgm"))
            if not files:
                raise FileFormatError(f"no .pgm frames under {d}")
            return [parse_pgm_bytes(f.read_bytes()) for f in files]
    raise FileFormatError(f"no label frames under {root}")


def load_optional_series(root: Path, sub: str, suffix: str, parser):
    d = root / sub
    if not d.is_dir():
        return None
    files = sorted(d.glob(f"[0-9][0-9][0-9][0-9]{suffix}"))
    if not files:
        return None
    return [parser(f.read_bytes()) for f in files]


# ---------------------------------------------------------------------------
# Metric reports


def write_report_bytes(report: dict) -> bytes:
    return (json.dumps(report, indent=1, sort_keys=True) + "\n").encode("utf-8")


def parse_report_bytes(data: bytes) -> dict:
    """Evaluation report: pq_scene/pq_frame blocks plus scalar miou/psnr."""
    try:
        doc = json.loads(data.decode("utf-8"))
        if not isinstance(doc, dict):
            raise _fail("report", "top level must be an object")
        for key in ("pq_scene", "pq_frame_mean", "miou", "psnr"):
            if key not in doc:
                raise _fail("report", f"missing key {key!r}")
        if not isinstance(doc["pq_scene"], dict) or "pq" not in doc["pq_scene"]:
            raise _fail("report", "pq_scene must be an object with a pq entry")
        return doc
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("report", str(e)) from e


# ---------------------------------------------------------------------------
# Model sidecar


def write_model_meta(path: str | Path, field_cfg_dict: dict, extra: dict | None = None) -> None:
    doc = {"fields": field_cfg_dict}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_model_meta(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict) or "fields" not in doc:
            raise _fail("model meta", "missing fields section")
        return doc
    except FileFormatError:
        raise
    except Exception as e:
        raise _fail("model meta", str(e)) from e

"""Command-line front door for the whole pipeline.

One binary, subcommand style: generate a synthetic dataset, train the fields,
cluster embeddings into a centroid cache, render labels, evaluate, run the
tracking baselines, benchmark loss costs, or dump raw embeddings for external
plotting.  Every command takes ``--seed`` and is deterministic under it, and
every command exits 0 on success or 1 with a single-line diagnostic on
stderr.  Outputs are staged and atomically published, so a failing command
leaves no partial files behind.

Configuration for ``train`` and ``gen-scene`` merges a flat JSON file
(``--config``) with flag overrides; flags win, unknown keys are rejected.

Heavy imports happen inside the handlers so ``--threads`` can pin the BLAS
pool size before numpy loads it.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    """Errors as single stderr lines with exit code 1 instead of usage dumps."""

    def error(self, message):
        print(f"liftfield: {message}", file=sys.stderr)
        raise SystemExit(1)


def _set_threads(n: int) -> None:
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _write_file(path: str | Path, data: bytes) -> None:
    """Write via a sibling temp file and atomic replace."""
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + f".tmp-{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, p)


class _StagedDir:
    """Build a directory next to its final path, then swap it in atomically.

    On failure the stage is removed and the final path is untouched.
    """

    def __init__(self, final: str | Path):
        self.final = Path(final)
        self.stage = self.final.with_name(self.final.name + f".tmp-{os.getpid()}")

    def __enter__(self) -> Path:
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.stage, self.final)
        return False


def _merge_config(config_path: str | None, overrides: dict) -> dict:
    from .fileio import parse_config_bytes

    merged = {}
    if config_path:
        merged = parse_config_bytes(Path(config_path).read_bytes())
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _load_model(ckpt: str):
    from .fields import FieldConfig, FieldModel
    from .fileio import load_checkpoint_into, read_model_meta

    meta = read_model_meta(str(ckpt) + ".json")
    model = FieldModel.create(FieldConfig.from_dict(meta["fields"]), seed=0)
    load_checkpoint_into(model.store, ckpt)
    return model, meta


def _camera_bounds(ds):
    return [ds.meta.near_far(cam) for cam in ds.cameras]


# ---------------------------------------------------------------------------
# Handlers


def _cmd_gen_scene(args) -> int:
    _set_threads(args.threads)
    from .fileio import save_dataset
    from .scenegen import GenConfig, generate_dataset, objects_per_image

    overrides = {
        "n_objects": args.objects,
        "seed": args.seed,
        "views": args.views,
        "width": args.width,
        "height": args.height,
        "theme": args.theme,
        "p_split": args.p_split,
        "p_flip": args.p_flip,
    }
    if args.no_permute:
        overrides["permute"] = False
    merged = _merge_config(args.config, overrides)
    if "n_objects" not in merged:
        raise ValueError("object count missing: pass --objects or put n_objects in the config")
    cfg = GenConfig.from_dict(merged)
    ds = generate_dataset(cfg)
    with _StagedDir(args.out) as stage:
        save_dataset(ds, stage)
    print(
        f"wrote {ds.n_views} views of {cfg.n_objects} objects to {args.out} "
        f"(mean {objects_per_image(ds.instance_gt):.2f} visible per view)"
    )
    return 0


def _cmd_train(args) -> int:
    _set_threads(args.threads)
    from .fileio import load_dataset, write_checkpoint_bytes, write_model_meta, write_train_log_bytes
    from .training import TrainConfig, default_field_config, train

    ds = load_dataset(args.data)
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "iters": args.iters,
        "batch_size": args.batch,
        "n_samples": args.samples,
    }
    cfg = TrainConfig.from_dict(_merge_config(args.config, overrides))
    field_overrides = {}
    if args.embed_dim is not None:
        field_overrides["embed_dim"] = args.embed_dim
    if args.density_res is not None:
        field_overrides["density_res"] = args.density_res
    if args.color_res is not None:
        field_overrides["color_res"] = args.color_res
    fcfg = default_field_config(ds, cfg.variant, **field_overrides)

    result = train(ds, cfg, fcfg)
    store = result.model.store
    _write_file(args.out, write_checkpoint_bytes([(n, store.slice_values(n)) for n in store.slice_names]))
    meta_path = str(args.out) + ".json"
    write_model_meta(meta_path, result.field_cfg.to_dict(), extra={"train": cfg.to_dict()})
    if args.log:
        _write_file(args.log, write_train_log_bytes(result.log_rows))
    last = result.log_rows[-1] if result.log_rows else {"loss_rgb": float("nan")}
    print(f"trained {cfg.iters} iterations ({cfg.variant}); final rgb loss {last['loss_rgb']:.5g}; wrote {args.out}")
    return 0


def _cmd_cluster(args) -> int:
    _set_threads(args.threads)
    import numpy as np

    from .clustering import build_sample_set, hierarchical_cluster, tune_min_cluster_size
    from .fileio import load_dataset, write_centroids_bytes
    from .rendering import render_frame_maps

    ds = load_dataset(args.data)
    model, _ = _load_model(args.ckpt)
    bounds = _camera_bounds(ds)
    rng = np.random.default_rng(args.seed)
    samples = build_sample_set(model, ds.cameras, bounds, args.pixels, args.views, rng, n_samples=args.samples)
    eps = args.eps if args.eps > 0 else None

    if args.min_cluster_size == "auto":
        n_tune = max(1, round(0.1 * ds.n_views))
        idx = np.linspace(0, ds.n_views - 1, n_tune).round().astype(int)
        frames = [
            render_frame_maps(model, ds.cameras[i], args.samples, *bounds[i], want_color=False) for i in idx
        ]
        refs = [ds.instance_noisy[i] for i in idx]
        size, scores = tune_min_cluster_size(samples, frames, refs, eps=eps)
        note = f"tuned over {len(scores)} candidates on {n_tune} frames"
    else:
        size = int(args.min_cluster_size)
        note = "fixed"
    cache = hierarchical_cluster(samples, min_sizes=size, eps=eps)
    _write_file(args.out, write_centroids_bytes(cache))
    total = sum(len(v) for v in cache.values())
    print(f"cached {total} centroids over {len(cache)} classes to {args.out} (min cluster size {size}, {note})")
    return 0


def _cmd_render_labels(args) -> int:
    _set_threads(args.threads)
    import numpy as np

    from .clustering import label_frames
    from .fileio import load_dataset, parse_centroids_bytes, write_pgm_bytes, write_ppm_bytes

    ds = load_dataset(args.data)
    model, _ = _load_model(args.ckpt)
    cache = parse_centroids_bytes(Path(args.cache).read_bytes())
    frames = label_frames(
        model, ds.cameras, _camera_bounds(ds), cache, n_samples=args.samples, want_color=args.with_color
    )
    with _StagedDir(args.out) as stage:
        (stage / "semantic").mkdir()
        if args.with_color:
            (stage / "rgb").mkdir()
        for i, maps in enumerate(frames):
            (stage / f"{i:04d}.pgm").write_bytes(write_pgm_bytes(maps["instance"]))
            (stage / "semantic" / f"{i:04d}.pgm").write_bytes(write_pgm_bytes(maps["semantic"].astype(np.int64)))
            if args.with_color:
                (stage / "rgb" / f"{i:04d}.ppm").write_bytes(write_ppm_bytes(maps["color"]))
    print(f"rendered {len(frames)} label maps to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    _set_threads(args.threads)
    import numpy as np

    from .fileio import load_label_dir, load_optional_series, parse_pgm_bytes, parse_ppm_bytes, write_report_bytes
    from .metrics import miou, pq_frame, pq_scene, psnr

    pred = load_label_dir(args.pred)
    gt = load_label_dir(args.gt, prefer=("instance_gt", "instance"))
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    pred_sem = load_optional_series(Path(args.pred), "semantic", ".pgm", parse_pgm_bytes)
    gt_sem = load_optional_series(Path(args.gt), "semantic", ".pgm", parse_pgm_bytes)
    use_sem = pred_sem is not None and gt_sem is not None

    frame_reports = [
        pq_frame(p, g, ps, gs)
        for p, g, ps, gs in zip(
            pred, gt, pred_sem if use_sem else [None] * len(pred), gt_sem if use_sem else [None] * len(gt)
        )
    ]
    scene = pq_scene(pred, gt, pred_sem if use_sem else None, gt_sem if use_sem else None)

    miou_val = float(miou(np.stack(pred_sem), np.stack(gt_sem))) if use_sem else None
    pred_rgb = load_optional_series(Path(args.pred), "rgb", ".ppm", parse_ppm_bytes)
    gt_rgb = load_optional_series(Path(args.gt), "rgb", ".ppm", parse_ppm_bytes)
    psnr_val = None
    if pred_rgb is not None and gt_rgb is not None:
        vals = [psnr(p, g) for p, g in zip(pred_rgb, gt_rgb)]
        psnr_val = float(np.mean([v for v in vals]))

    report = {
        "pq_scene": scene.to_dict(),
        "pq_frame": [r.to_dict() for r in frame_reports],
        "pq_frame_mean": float(np.mean([r.pq for r in frame_reports])),
        "miou": miou_val,
        "psnr": psnr_val,
    }
    _write_file(args.report, write_report_bytes(report))
    parts = [f"pq_scene={scene.pq:.4f}", f"pq_frame_mean={report['pq_frame_mean']:.4f}"]
    if miou_val is not None:
        parts.append(f"miou={miou_val:.4f}")
    if psnr_val is not None:
        parts.append(f"psnr={psnr_val:.2f}")
    print(" ".join(parts))
    return 0


def _cmd_track(args) -> int:
    _set_threads(args.threads)
    from .fileio import load_dataset, load_label_dir, write_pgm_bytes
    from .tracking import default_fusion_radius, track_iou, track_pointcloud, track_warp

    labels = load_label_dir(args.pred, prefer=("instance", "instance_noisy", "instance_gt"))
    if args.method == "iou":
        tracked = track_iou(labels)
    else:
        ds = load_dataset(args.data)
        if len(labels) != ds.n_views:
            raise ValueError(f"{len(labels)} label frames vs {ds.n_views} dataset views")
        if args.method == "warp":
            tracked = track_warp(labels, list(ds.depth), ds.cameras)
        else:
            radius = args.radius if args.radius > 0 else default_fusion_radius(ds.meta.min_object_radius)
            tracked = track_pointcloud(labels, list(ds.depth), ds.cameras, radius)
    with _StagedDir(args.out) as stage:
        for i, lab in enumerate(tracked):
            (stage / f"{i:04d}.pgm").write_bytes(write_pgm_bytes(lab))
    print(f"tracked {len(tracked)} frames ({args.method}) to {args.out}")
    return 0


def _cmd_bench_loss(args) -> int:
    _set_threads(args.threads)
    import time

    import numpy as np

    from . import autodiff as ad
    from .losses import linear_assignment_loss, slowfast_loss

    ks = [int(s) for s in args.labels.split(",") if s]
    if not ks:
        raise ValueError("need at least one K in --labels")
    rng = np.random.default_rng(args.seed)
    b = args.batch

    def time_call(fn) -> float:
        fn()  # warmup
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            fn()
        return (time.perf_counter() - t0) / args.repeats

    lines = ["k,slowfast_s,linassign_s"]
    for k in ks:
        labels = rng.integers(0, k, size=b)
        half = b // 2
        fast_vals = rng.normal(size=(half, 3))
        slow_vals = rng.normal(size=(b - half, 3))
        logits_vals = rng.normal(size=(b, k))

        def run_sf():
            fast = ad.leaf(fast_vals)
            slow = ad.const(slow_vals)
            out = slowfast_loss(fast, labels[:half], slow, labels[half:])
            ad.backward(out.var, wanted={fast})

        def run_la():
            logits = ad.leaf(logits_vals)
            probs = ad.softmax(logits, axis=1)
            out, _ = linear_assignment_loss(probs, labels)
            ad.backward(out.var, wanted={logits})

        lines.append(f"{k},{time_call(run_sf):.6f},{time_call(run_la):.6f}")
    _write_file(args.out, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"benchmarked {len(ks)} label counts at batch {b}; wrote {args.out}")
    return 0


def _cmd_dump_embeddings(args) -> int:
    _set_threads(args.threads)
    import numpy as np

    from .clustering import build_sample_set
    from .fileio import load_dataset

    ds = load_dataset(args.data)
    model, _ = _load_model(args.ckpt)
    rng = np.random.default_rng(args.seed)
    samples = build_sample_set(
        model, ds.cameras, _camera_bounds(ds), args.pixels, args.views, rng, n_samples=args.samples
    )
    d = samples.embeddings.shape[1]
    w = ds.cameras[0].width
    lines = ["view,u,v,class," + ",".join(f"e{i}" for i in range(d))]
    for (view, pix), cls, emb in zip(samples.sources, samples.classes, samples.embeddings):
        u = (pix % w) + 0.5
        v = (pix // w) + 0.5
        lines.append(f"{view},{u},{v},{cls}," + ",".join(f"{x:.9g}" for x in emb))
    _write_file(args.out, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"dumped {len(samples)} foreground embeddings to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liftfield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
        p.add_argument("--threads", type=int, default=0, help="BLAS thread cap; 0 leaves the environment alone (default: 0)")

    p = sub.add_parser("gen-scene", help="generate a synthetic multi-view dataset")
    p.add_argument("--objects", type=int, default=None, help="object count N (default: from config)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--views", type=int, default=None, help="camera count; omit for the sqrt(N) law")
    p.add_argument("--width", type=int, default=None, help="image width (default: 64)")
    p.add_argument("--height", type=int, default=None, help="image height (default: 64)")
    p.add_argument("--theme", default=None, choices=("old_room", "large_corridor"), help="scene theme (default: old_room)")
    p.add_argument("--p-split", type=float, default=None, help="segment split probability (default: 0.1)")
    p.add_argument("--p-flip", type=float, default=None, help="boundary flip rate (default: 0.05)")
    p.add_argument("--no-permute", action="store_true", help="disable per-view ID permutation")
    p.add_argument("--config", default=None, help="flat JSON config; flags override it")
    common(p)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", help="train fields on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", default=None, help="flat JSON training config; flags override it")
    p.add_argument("--variant", default=None, help="instance loss variant (default: sf+conc)")
    p.add_argument("--iters", type=int, default=None, help="total iterations (default: 5000)")
    p.add_argument("--batch", type=int, default=None, help="rays per step (default: 512)")
    p.add_argument("--samples", type=int, default=None, help="samples per ray (default: 32)")
    p.add_argument("--embed-dim", type=int, default=None, help="embedding width (default: 3; 16 for linassign)")
    p.add_argument("--density-res", type=int, default=None, help="density grid resolution (default: 64)")
    p.add_argument("--color-res", type=int, default=None, help="color grid resolution (default: 32)")
    p.add_argument("--log", default=None, help="also write the training log CSV here")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("cluster", help="cluster rendered embeddings into a centroid cache")
    p.add_argument("--ckpt", required=True, help="checkpoint from train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output centroid cache JSON")
    p.add_argument("--min-cluster-size", default="auto", help="density threshold, or 'auto' to tune (default: auto)")
    p.add_argument("--eps", type=float, default=0.0, help="neighborhood radius; 0 = median 5-NN heuristic (default: 0)")
    p.add_argument("--pixels", type=int, default=10000, help="embedding samples to pool (default: 10000)")
    p.add_argument("--views", type=int, default=20, help="view draws, with replacement (default: 20)")
    p.add_argument("--samples", type=int, default=32, help="samples per ray (default: 32)")
    common(p)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("render-labels", help="render instance-label maps for every view")
    p.add_argument("--ckpt", required=True, help="checkpoint from train")
    p.add_argument("--cache", required=True, help="centroid cache from cluster")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output label directory")
    p.add_argument("--samples", type=int, default=32, help="samples per ray (default: 32)")
    p.add_argument("--with-color", action="store_true", help="also write rendered RGB frames")
    common(p)
    p.set_defaults(func=_cmd_render_labels)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True, help="predicted label directory")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--report", required=True, help="output JSON report path")
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("track", help="run a tracking baseline over per-view labels")
    p.add_argument("--method", required=True, choices=("iou", "warp", "pcl"), help="matching strategy")
    p.add_argument("--pred", required=True, help="label directory to make consistent")
    p.add_argument("--data", required=True, help="dataset directory (cameras and depth)")
    p.add_argument("--out", required=True, help="output label directory")
    p.add_argument("--radius", type=float, default=0.0, help="pcl overlap radius; 0 = half the smallest object radius (default: 0)")
    common(p)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("bench-loss", help="wall-time the slow-fast loss against linear assignment")
    p.add_argument("--labels", required=True, help="comma-separated label counts, e.g. 5,25,100,500")
    p.add_argument("--batch", type=int, default=2048, help="pixels per synthetic batch (default: 2048)")
    p.add_argument("--repeats", type=int, default=5, help="timed repetitions per cell (default: 5)")
    p.add_argument("--out", required=True, help="output CSV path")
    common(p)
    p.set_defaults(func=_cmd_bench_loss)

    p = sub.add_parser("dump-embeddings", help="write sampled foreground embeddings as CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint from train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--pixels", type=int, default=10000, help="pixel samples (default: 10000)")
    p.add_argument("--views", type=int, default=20, help="view draws, with replacement (default: 20)")
    p.add_argument("--samples", type=int, default=32, help="samples per ray (default: 32)")
    common(p)
    p.set_defaults(func=_cmd_dump_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("liftfield: interrupted", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"liftfield: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

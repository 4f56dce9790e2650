"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/shape error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import gradcheck
from .decoder import grounding_forward
from .errors import DivergenceError, VoxliftError
from .evalkit import acc_at_iou
from .formats import (RunConfig, WeightBundle, default_schedule, dump_json, load_manifest,
                      read_f32, read_tensor_set, write_tensor_set)
from .geometry import CameraView, Extrinsics, Intrinsics
from .lift import Patch3DSet, lift_views
from .mlp import MlpWeights
from .objective import Box3D, train_box_head
from .pipeline import ground_scene, lift_scene, pool_patches, training_scene
from .pooling import DEFAULT_CAP, fps_pool, voxel_pool
from .scenegen import SceneSpec, generate, summary, write_scene

log = logging.getLogger("voxlift")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _thresholds(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or any(not 0 <= v <= 1 for v in values):
        raise argparse.ArgumentTypeError("thresholds must be comma-separated values in [0, 1]")
    return values


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    for i in range(args.scenes):
        spec = SceneSpec(seed=args.seed + i, n_boxes=args.boxes, n_views=args.views,
                         image=(args.width, args.height, args.patch),
                         feature_mode=args.feature_mode, feature_dim=args.feature_dim)
        scene = generate(spec)
        scene_id = f"scene_{i:04d}"
        path = write_scene(scene, out / scene_id, scene_id)
        print(summary(scene, scene_id, path))
    return 0


def cmd_init_weights(args) -> int:
    bundle = WeightBundle.init(args.dim, args.layers, args.seed)
    if args.zero_pos:
        bundle = WeightBundle(MlpWeights.zeros(3, args.dim, args.dim), bundle.decoder, bundle.seed)
    bundle.save(args.out)
    print(json.dumps({"weights": str(args.out), "dim": args.dim, "layers": args.layers, "seed": args.seed}))
    return 0


def _patch_tensors(patches: Patch3DSet) -> dict:
    return {"features": patches.features, "positions": patches.positions,
            "source": patches.source.astype(np.float32)}


def cmd_lift(args) -> int:
    manifest = load_manifest(args.scene)
    weights = WeightBundle.load(args.weights)
    patches = lift_scene(manifest, weights)
    side = write_tensor_set(args.out, _patch_tensors(patches), {"kind": "patch3d", "scene_id": manifest.scene_id})
    print(json.dumps({"tokens": len(patches), "dim": patches.dim, "sidecar": str(side)}))
    return 0


def _load_patches(path) -> Patch3DSet:
    tensors, _ = read_tensor_set(path)
    try:
        return Patch3DSet(tensors["features"], tensors["positions"], tensors["source"].astype(np.int64))
    except KeyError as exc:
        raise VoxliftError(f"{path}: tensor set lacks {exc}") from exc


def cmd_pool(args) -> int:
    patches = _load_patches(args.inp)
    if args.strategy == "voxel":
        if args.voxel_size is None:
            raise _usage("--strategy voxel needs --voxel-size")
        pooled = voxel_pool(patches, args.voxel_size, args.cap if args.cap > 0 else None)
    else:
        if args.count is None:
            raise _usage("--strategy fps needs --count")
        pooled = fps_pool(patches, args.count, args.seed)
    stem = args.out or str(Path(args.inp).with_suffix("")) + ".pooled"
    write_tensor_set(stem, {"features": pooled.features, "positions": pooled.positions,
                            "counts": pooled.counts.astype(np.float32)},
                     {"kind": "pooled", **pooled.strategy})
    print(len(pooled))
    return 0


def _run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        doc = RunConfig.load(args.config).to_json()
    dec = dict(doc.get("decoder", {}))
    if getattr(args, "queries", None) is not None:
        dec["queries"] = args.queries
    if getattr(args, "layers", None) is not None:
        dec["layers"] = args.layers
        dec["knn_schedule"] = list(default_schedule(args.layers))
    if dec:
        doc["decoder"] = dec
    return RunConfig.from_json(doc)


def cmd_ground(args) -> int:
    manifest = load_manifest(args.scene)
    cfg = _run_config(args)
    weights = WeightBundle.load(args.weights)
    loc = read_f32(args.loc, (manifest.feature_dim,)) if args.loc else None
    out = ground_scene(manifest, cfg, weights, loc)
    text = dump_json(out.to_json(), args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def _selected_boxes(pred: dict) -> list[Box3D]:
    boxes = pred.get("boxes", [])
    return [Box3D.from_json(boxes[i]) for i in pred.get("selected", []) if i < len(boxes)]


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise VoxliftError(f"{len(args.pred)} prediction files for {len(args.gt)} manifests")
    preds, gts, ids = [], [], []
    for pred_path, gt_path in zip(args.pred, args.gt):
        pred = json.loads(Path(pred_path).read_text())
        manifest = load_manifest(gt_path)
        chosen = _selected_boxes(pred)
        if args.multi:
            preds.append(chosen)
            gts.append(manifest.boxes())
        else:
            preds.append(chosen[0] if chosen else [])
            gts.append(manifest.target_box())
        ids.append(manifest.scene_id)
    report = acc_at_iou(preds, gts, args.iou, ids)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(args.iou))
    sys.stdout.write(dump_json(report.to_json()))
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run(args.op, args.trials, args.tol, args.seed)
    print(json.dumps(result.to_json()))
    return 0 if result.passed else EXIT_NUMERIC


def cmd_train_boxhead(args) -> int:
    manifests = sorted(Path(args.scenes).glob("*/manifest.json"))
    if not manifests:
        raise VoxliftError(f"no scene manifests under {args.scenes}")
    cfg = _run_config(args)
    if args.weights:
        weights = WeightBundle.load(args.weights)
    else:
        weights = WeightBundle.init(cfg.decoder.dim, cfg.decoder.layers, cfg.seed)
    scenes = [training_scene(load_manifest(m), cfg, weights) for m in manifests]
    result = train_box_head(scenes, weights.decoder.box_head, args.steps, args.lr,
                            aux_loss=cfg.objective.aux_loss, momentum=args.momentum,
                            temperature=cfg.objective.temperature)
    lines = ["step,diou_loss,infonce_loss"]
    lines += [f"{s},{d!r},{n!r}" for s, d, n in result.trajectory]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.save_weights:
        dec = weights.decoder
        trained = type(dec)(dec.layers, dec.query_pos, result.head)
        WeightBundle(weights.pos_mlp, trained, weights.seed).save(args.save_weights)
    return 0


def _bench_views(n_views: int, patches_per_view: int, dim: int, rng) -> list[CameraView]:
    h = max(d for d in range(1, int(np.sqrt(patches_per_view)) + 1) if patches_per_view % d == 0)
    w = patches_per_view // h
    patch = 14
    width, height = w * patch, h * patch
    intr = Intrinsics(0.8 * width, 0.8 * width, width / 2, height / 2, width, height)
    views = []
    for v in range(n_views):
        theta = 2 * np.pi * v / n_views
        extr = Extrinsics.look_at([4 * np.cos(theta), 4 * np.sin(theta), 1.5], [0, 0, 0.5])
        depth = rng.uniform(2.0, 6.0, (height, width)).astype(np.float32)
        feats = rng.standard_normal((h, w, dim)).astype(np.float32)
        views.append(CameraView(intr, extr, depth, feats, patch))
    return views


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    views = _bench_views(args.views, args.patches_per_view, args.dim, rng)
    weights = WeightBundle.init(args.dim, 4, args.seed)
    cfg = RunConfig.from_json({"decoder": {"dim": args.dim}})
    loc = rng.standard_normal(args.dim)
    times = {"lift": [], "pool": [], "decode": []}
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        patches = lift_views(views, weights.pos_mlp)
        t1 = time.perf_counter()
        tokens = pool_patches(patches, cfg.pooling)
        t2 = time.perf_counter()
        grounding_forward(tokens.features, tokens.positions, loc, cfg.decoder, weights.decoder)
        t3 = time.perf_counter()
        times["lift"].append(t1 - t0)
        times["pool"].append(t2 - t1)
        times["decode"].append(t3 - t2)
    print(json.dumps({
        "views": args.views, "patches_per_view": args.patches_per_view,
        "tokens_in": len(patches), "tokens_pooled": len(tokens),
        "seconds": {k: {"min": min(v), "mean": float(np.mean(v))} for k, v in times.items()},
    }))
    return 0


# ---------------------------------------------------------------------------
# parser

class _UsageError(Exception):
    pass


def _usage(msg: str) -> _UsageError:
    return _UsageError(msg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxlift", description="Multi-view 3D patch lifting, pooling and grounding.")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap on worker threads (default: $VOXLIFT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--scenes", type=_positive_int, required=True)
    s.add_argument("--views", type=_positive_int, default=32)
    s.add_argument("--boxes", type=_positive_int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=_positive_int, default=336)
    s.add_argument("--height", type=_positive_int, default=336)
    s.add_argument("--patch", type=_positive_int, default=14)
    s.add_argument("--feature-dim", type=_positive_int, default=64)
    s.add_argument("--feature-mode", choices=["random", "box_onehot_plus_noise"], default="box_onehot_plus_noise")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init-weights", help="write a seeded weight file")
    s.add_argument("--dim", type=_positive_int, default=64)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--zero-pos", action="store_true", help="all-zero position encoder")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_weights)

    s = sub.add_parser("lift", help="lift a scene into 3D patches")
    s.add_argument("--scene", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True, help="output stem; writes <stem>.json and <stem>.<tensor>.f32")
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("pool", help="pool 3D patches")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--strategy", choices=["voxel", "fps"], required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--voxel-size", type=float)
    g.add_argument("--count", type=_positive_int)
    s.add_argument("--cap", type=int, default=DEFAULT_CAP, help="voxel token cap; 0 disables")
    s.add_argument("--seed", type=int, default=0, help="fps seed index")
    s.add_argument("--out")
    s.set_defaults(func=cmd_pool)

    s = sub.add_parser("ground", help="lift, pool and decode boxes for a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--config")
    s.add_argument("--weights", required=True)
    s.add_argument("--loc", help="location token blob (default: the manifest's)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ground)

    s = sub.add_parser("eval", help="Acc@IoU of grounding outputs")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--iou", type=_thresholds, default=[0.25, 0.5])
    s.add_argument("--multi", action="store_true", help="score all selected boxes against all gt boxes")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--op", choices=["diou", "infonce", "boxhead"], required=True)
    s.add_argument("--trials", type=_positive_int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train-boxhead", help="optimize the box head on a directory of scenes")
    s.add_argument("--scenes", required=True)
    s.add_argument("--steps", type=_positive_int, required=True)
    s.add_argument("--lr", type=float, required=True)
    s.add_argument("--momentum", type=float, default=0.95)
    s.add_argument("--config")
    s.add_argument("--weights")
    s.add_argument("--queries", type=_positive_int)
    s.add_argument("--layers", type=_positive_int)
    s.add_argument("--out", help="trajectory CSV (default: stdout)")
    s.add_argument("--save-weights")
    s.set_defaults(func=cmd_train_boxhead)

    s = sub.add_parser("bench", help="per-stage wall times")
    s.add_argument("--views", type=_positive_int, default=16)
    s.add_argument("--patches-per-view", type=_positive_int, default=576)
    s.add_argument("--repeat", type=_positive_int, default=3)
    s.add_argument("--dim", type=_positive_int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def _thread_limit(args, parser):
    n = args.threads
    env = os.environ.get("VOXLIFT_THREADS")
    if n is None and env:
        try:
            n = _positive_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            parser.error(f"VOXLIFT_THREADS must be a positive integer, got {env!r}")
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args, parser):
            return args.func(args)
    except _UsageError as exc:
        parser.error(str(exc))
    except DivergenceError as exc:
        print(f"voxlift: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VoxliftError, OSError, json.JSONDecodeError) as exc:
        print(f"voxlift: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())

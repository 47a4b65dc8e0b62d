"""Operator-facing command surface.

Subcommands: stack, infer, eval, bench, train-toy, synth, serve. Every
command writes a run manifest (JSON) next to its outputs so a run can be
reproduced from its recorded arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import annotation as ann
from . import evaluation, postprocess, synth
from . import tensor as T
from .model import ModelConfig, build_model, generate_priors, load_weights, save_weights
from .tensor import Tensor


def write_manifest(out_dir: Path, command: str, config: dict, paths: dict,
                   timings: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "paths": paths,
        "timings": timings,
        "tool_version": __version__,
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _config_from_args(args) -> ModelConfig:
    base = ModelConfig()
    return ModelConfig(
        view_size=tuple(args.view_size),
        num_classes=args.num_classes,
        variances=tuple(args.variances),
        score_threshold=args.score_threshold,
        nms_iou_threshold=args.nms_iou_threshold,
        top_k=args.top_k,
        channel_scale=args.channel_scale,
        priors_per_cell=base.priors_per_cell,
    )


def _add_config_flags(p: argparse.ArgumentParser):
    d = ModelConfig()
    p.add_argument("--view-size", type=int, nargs=2, default=list(d.view_size),
                   metavar=("W", "H"), help="single-view resolution")
    p.add_argument("--num-classes", type=int, default=d.num_classes)
    p.add_argument("--variances", type=float, nargs=2, default=list(d.variances))
    p.add_argument("--score-threshold", type=float, default=d.score_threshold)
    p.add_argument("--nms-iou-threshold", type=float, default=d.nms_iou_threshold)
    p.add_argument("--top-k", type=int, default=d.top_k)
    p.add_argument("--channel-scale", type=float, default=d.channel_scale)


def cmd_stack(args) -> int:
    left_dir, right_dir, out_dir = map(Path, (args.left_dir, args.right_dir, args.out_dir))
    t0 = time.perf_counter()
    lefts = {p.name: p for p in sorted(left_dir.iterdir()) if p.is_file()}
    rights = {p.name: p for p in sorted(right_dir.iterdir()) if p.is_file()}
    unmatched = sorted(set(lefts) ^ set(rights))
    if unmatched:
        for name in unmatched:
            print(f"unmatched file: {name}", file=sys.stderr)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, errors = [], []
    for name in sorted(lefts):
        left = np.asarray(Image.open(lefts[name]).convert("RGB"))
        right = np.asarray(Image.open(rights[name]).convert("RGB"))
        try:
            stacked = ann.stack_pair(left, right)
        except ValueError as e:
            errors.append(f"{name}: {e}")
            continue
        out_path = out_dir / (Path(name).stem + ".png")
        Image.fromarray(stacked).save(out_path)
        entries.append(ann.IndexEntry(str(out_path), "", args.source))
    for e in errors:
        print(e, file=sys.stderr)
    index = ann.DatasetIndex(entries)
    index.write(out_dir / "index.txt")
    write_manifest(out_dir, "stack", {"source": args.source},
                   {"left_dir": str(left_dir), "right_dir": str(right_dir),
                    "out_dir": str(out_dir)},
                   {"seconds": time.perf_counter() - t0})
    return 1 if errors else 0


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    model = load_weights(args.weights)
    config = model.config
    priors = generate_priors(config)
    index = ann.DatasetIndex.read(args.index)
    class_names = ("background",) + tuple(args.classes)
    class_names = class_names + tuple(
        f"class{i}" for i in range(len(class_names), config.num_classes))
    per_image = {}
    for entry in index.entries:
        try:
            img = np.asarray(Image.open(entry.image_path).convert("RGB"))
        except OSError as e:
            print(f"skipping unreadable image {entry.image_path}: {e}", file=sys.stderr)
            continue
        x = Tensor(synth.normalize_image(img)[None])
        conf, loc = model.forward(x)
        dets = postprocess.detect(conf.data, loc.data, priors, config, class_names)[0]
        per_image[Path(entry.image_path).stem] = dets
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    postprocess.write_detections(out, per_image)
    write_manifest(out.parent, "infer", json.loads(config.to_json()),
                   {"weights": str(args.weights), "index": str(args.index),
                    "out": str(out)},
                   {"seconds": time.perf_counter() - t0})
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    index = ann.DatasetIndex.read(args.index)
    class_names = ("background",) + tuple(args.classes)
    dets = postprocess.read_detections(args.detections, class_names)
    report = evaluation.evaluate(index, dets, args.gt_dir, args.pr_iou_threshold)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(evaluation.format_report(report))
    kv = evaluation.report_keyvalues(report)
    (out_dir / "report.json").write_text(json.dumps(kv, indent=2) + "\n")
    for f in report.missing_files:
        print(f"missing: {f}", file=sys.stderr)
    write_manifest(out_dir, "eval", {"pr_iou_threshold": args.pr_iou_threshold},
                   {"index": str(args.index), "detections": str(args.detections),
                    "gt_dir": str(args.gt_dir) if args.gt_dir else None,
                    "out_dir": str(out_dir)},
                   {"seconds": time.perf_counter() - t0})
    print(evaluation.format_report(report))
    return 0


def run_bench(config: ModelConfig, iterations: int, warmup: int,
              weights: str | None = None, seed: int = 0) -> dict:
    """Time forward-only and forward+NMS, ms/frame, mean over iterations."""
    model = load_weights(weights) if weights else build_model(config, seed=seed)
    config = model.config
    priors = generate_priors(config)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(
        (1, 3, 2 * config.view_h, config.view_w)).astype(np.float32))

    for _ in range(warmup):
        model.forward(x)
    infer_ms, full_ms = [], []
    for _ in range(iterations):
        t0 = time.perf_counter()
        conf, loc = model.forward(x)
        t1 = time.perf_counter()
        postprocess.detect(conf.data, loc.data, priors, config)
        t2 = time.perf_counter()
        infer_ms.append((t1 - t0) * 1e3)
        full_ms.append((t2 - t0) * 1e3)
    return {
        "resolution": f"{config.view_w}x{2 * config.view_h}",
        "iterations": iterations,
        "warmup": warmup,
        "inference_only_ms_per_frame": float(np.mean(infer_ms)),
        "inference_plus_nms_ms_per_frame": float(np.mean(full_ms)),
    }


def cmd_bench(args) -> int:
    config = _config_from_args(args)
    result = run_bench(config, args.iterations, args.warmup, args.weights)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bench.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"Resolution {result['resolution']}")
    print(f"Inference only\t{result['inference_only_ms_per_frame']:.1f} ms/frame")
    print(f"Inference + NMS\t{result['inference_plus_nms_ms_per_frame']:.1f} ms/frame")
    write_manifest(out_dir, "bench", json.loads(config.to_json()),
                   {"weights": args.weights, "out_dir": str(out_dir)},
                   {"iterations": args.iterations, "warmup": args.warmup})
    return 0


def cmd_train_toy(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = synth.SceneSpec(seed=args.seed,
                           dy_jitter=(args.dy_jitter_min, args.dy_jitter_max))
    scenes = synth.load_scenes(spec, args.scenes)
    result = synth.train_toy(
        synth.TOY_CONFIG, scenes, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed,
        checkpoint_path=out_dir / "toy_weights.bin",
        log=print if args.verbose else None)
    curve_path = out_dir / "loss_curve.tsv"
    curve_path.write_text("".join(
        f"{i}\t{v!r}\n" for i, v in enumerate(result.loss_curve)))
    if result.diverged:
        print("training diverged; checkpoint holds the last good epoch",
              file=sys.stderr)
    write_manifest(out_dir, "train-toy",
                   json.loads(synth.TOY_CONFIG.to_json()) | asdict(spec),
                   {"out_dir": str(out_dir)},
                   {"seconds": time.perf_counter() - t0,
                    "epochs": args.epochs, "scenes": args.scenes})
    return 1 if result.diverged else 0


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    spec = synth.SceneSpec(seed=args.seed,
                           dy_jitter=(args.dy_jitter_min, args.dy_jitter_max))
    synth.make_dataset(spec, args.out_dir, args.count)
    write_manifest(Path(args.out_dir), "synth", asdict(spec),
                   {"out_dir": str(args.out_dir)},
                   {"seconds": time.perf_counter() - t0})
    return 0


def cmd_serve(args) -> int:
    from . import server
    index = ann.DatasetIndex.read(args.index)
    ui_dir = Path(args.ui_dir) if args.ui_dir else None
    httpd = server.serve(index, args.annotations_dir, args.bind, ui_dir)
    host, port = httpd.server_address[:2]
    print(f"serving annotation API on http://{host}:{port}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odssd",
                                description="stereo object-disparity toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("stack", help="stack left/right image pairs")
    ps.add_argument("left_dir")
    ps.add_argument("right_dir")
    ps.add_argument("out_dir")
    ps.add_argument("--source", default="unknown")
    ps.set_defaults(fn=cmd_stack)

    pi = sub.add_parser("infer", help="run detection over a dataset index")
    pi.add_argument("weights")
    pi.add_argument("index")
    pi.add_argument("out")
    pi.add_argument("--classes", nargs="+", default=["car"])
    pi.set_defaults(fn=cmd_infer)

    pe = sub.add_parser("eval", help="score detections against annotations")
    pe.add_argument("index")
    pe.add_argument("detections")
    pe.add_argument("out_dir")
    pe.add_argument("--gt-dir", default=None,
                    help="directory of 16-bit dense disparity PNGs")
    pe.add_argument("--classes", nargs="+", default=["car"])
    pe.add_argument("--pr-iou-threshold", type=float,
                    default=evaluation.PR_IOU_THRESHOLD)
    pe.set_defaults(fn=cmd_eval)

    pb = sub.add_parser("bench", help="time inference and inference+NMS")
    _add_config_flags(pb)
    pb.add_argument("--weights", default=None)
    pb.add_argument("--iterations", type=int, default=5)
    pb.add_argument("--warmup", type=int, default=1)
    pb.add_argument("out_dir")
    pb.set_defaults(fn=cmd_bench)

    pt = sub.add_parser("train-toy", help="desk-scale training on synthetic scenes")
    pt.add_argument("out_dir")
    pt.add_argument("--scenes", type=int, default=200)
    pt.add_argument("--epochs", type=int, default=150)
    pt.add_argument("--batch-size", type=int, default=8)
    pt.add_argument("--lr", type=float, default=1e-3)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--dy-jitter-min", type=int, default=0)
    pt.add_argument("--dy-jitter-max", type=int, default=0)
    pt.add_argument("--verbose", action="store_true")
    pt.set_defaults(fn=cmd_train_toy)

    pg = sub.add_parser("synth", help="write a synthetic stacked dataset")
    pg.add_argument("out_dir")
    pg.add_argument("--count", type=int, default=50)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--dy-jitter-min", type=int, default=0)
    pg.add_argument("--dy-jitter-max", type=int, default=0)
    pg.set_defaults(fn=cmd_synth)

    pv = sub.add_parser("serve", help="HTTP backend for the annotation UI")
    pv.add_argument("index")
    pv.add_argument("annotations_dir")
    pv.add_argument("--bind", default="127.0.0.1:8760")
    pv.add_argument("--ui-dir", default=None)
    pv.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

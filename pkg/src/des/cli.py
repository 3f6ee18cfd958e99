"""Command-line interface: training, evaluation, inference, the ablation
grid, gradient checking, label-grid rasterization and activation dumps."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .ablation import DEFAULT_ARMS, ablate, format_table, results_to_dict
from .config import NetConfig
from .data import (
    boxes_to_json,
    class_names_for,
    gen_synthetic,
    load_dataset,
    load_manifest,
    parse_json_annotation,
    parse_voc_xml,
    read_ppm,
    save_dataset,
    write_pgm,
    write_ppm,
)
from .detector import Network, detect
from .evaluate import evaluate
from .gradsuite import format_results, run_suite
from .serialize import load_checkpoint
from .tensor import Tensor
from .train import train
from .weak_gt import rasterize


def _load_network(ckpt_path):
    arrays, cfg_dict = load_checkpoint(ckpt_path)
    if cfg_dict is None:
        raise SystemExit(f"checkpoint {ckpt_path} carries no config manifest")
    net = Network(NetConfig.from_dict(cfg_dict))
    net.load_state(arrays)
    return net


def _load_samples(data_path, grid_size=None):
    manifest = load_manifest(data_path)
    return load_dataset(manifest, grid_size=grid_size), manifest


def cmd_train(args):
    cfg = NetConfig.from_json(Path(args.config).read_text())
    samples, _ = _load_samples(args.data, grid_size=cfg.seg_grid_size)
    result = train(cfg, samples, out_dir=args.out, log_every=args.log_every)
    print(f"trained {cfg.total_iterations} iterations; "
          f"final loss {result.rows[-1][3]:.4f}")
    print(f"loss curve: {result.loss_csv}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args):
    net = _load_network(args.ckpt)
    samples, manifest = _load_samples(args.data)
    report = evaluate(net, samples)
    payload = report.to_dict(class_names=manifest.classes)
    Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"mAP@0.5 = {report.mean_ap:.4f} over {report.num_images} images "
          f"({report.mean_time_ms:.1f} ms/img)")
    for name, ap in payload["per_class_ap"].items():
        print(f"  {name:<12} AP {'-' if ap is None else f'{ap:.4f}'}")
    print(f"report: {args.report}")
    return 0


def _draw_box(image, det, value):
    h, w = image.shape[1:]
    x0 = int(np.clip(round(det.xmin * w), 0, w - 1))
    x1 = int(np.clip(round(det.xmax * w) - 1, 0, w - 1))
    y0 = int(np.clip(round(det.ymin * h), 0, h - 1))
    y1 = int(np.clip(round(det.ymax * h) - 1, 0, h - 1))
    image[:, y0, x0:x1 + 1] = value[:, None]
    image[:, y1, x0:x1 + 1] = value[:, None]
    image[:, y0:y1 + 1, x0] = value[:, None]
    image[:, y0:y1 + 1, x1] = value[:, None]


_PALETTE = np.array([[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.3, 1.0],
                     [1.0, 1.0, 0.1], [1.0, 0.1, 1.0], [0.1, 1.0, 1.0]])


def cmd_infer(args):
    net = _load_network(args.ckpt)
    image = read_ppm(args.image)
    dets = detect(net, image, score_thresh=args.score_thresh)
    for d in dets:
        print(f"class {d.class_id}  score {d.score:.3f}  "
              f"box ({d.xmin:.3f}, {d.ymin:.3f}, {d.xmax:.3f}, {d.ymax:.3f})")
    if not dets:
        print("no detections above threshold")
    if args.overlay:
        canvas = image.copy()
        for d in dets:
            _draw_box(canvas, d, _PALETTE[(d.class_id - 1) % len(_PALETTE)])
        write_ppm(canvas, args.overlay)
        print(f"overlay: {args.overlay}")
    return 0


def cmd_ablate(args):
    cfg = NetConfig.from_json(Path(args.config).read_text())
    if args.data:
        samples, _ = _load_samples(args.data, grid_size=cfg.seg_grid_size)
    else:
        samples = gen_synthetic(cfg.seed, args.train_count + args.eval_count,
                                classes=cfg.num_classes, size=cfg.input_size,
                                grid_stride=cfg.first_source_stride)
    train_samples = samples[:-args.eval_count] if args.eval_count else samples
    eval_samples = samples[-args.eval_count:] if args.eval_count else samples
    results = ablate(cfg, train_samples, eval_samples, seeds=args.seeds,
                     progress=lambda msg: print(msg, flush=True))
    table = format_table(results)
    print(table)
    if args.out:
        Path(args.out).write_text(json.dumps(results_to_dict(results), indent=2) + "\n")
        print(f"report: {args.out}")
    return 0


def cmd_gradcheck(args):
    results = run_suite(points=args.points,
                        progress=lambda msg: print(msg, flush=True))
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_rasterize_gt(args):
    path = Path(args.annotation)
    classes = args.classes.split(",") if args.classes else class_names_for()
    if classes[0] != "background":
        classes = ["background"] + classes
    if path.suffix.lower() == ".xml":
        _, boxes = parse_voc_xml(path.read_text(), classes)
    else:
        boxes = parse_json_annotation(path.read_text())
    grid = rasterize(boxes, args.grid_h, args.grid_w)
    n = max(1, len(classes) - 1)
    scale = 255 // n
    write_pgm(grid.labels * scale, args.out)
    sidecar = {
        "gray_to_class": {str(k * scale): {"class_id": k, "name": classes[k]}
                          for k in sorted(set(grid.labels.ravel().tolist()))},
        "grid": [args.grid_h, args.grid_w],
    }
    Path(args.out + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"label grid: {args.out} (+ {args.out}.json)")
    return 0


def _to_gray(slice2d):
    lo, hi = slice2d.min(), slice2d.max()
    if hi - lo < 1e-12:
        return np.zeros_like(slice2d)
    return (slice2d - lo) / (hi - lo) * 255.0


def cmd_dump_activation(args):
    net = _load_network(args.ckpt)
    if net.seg is None:
        raise SystemExit("dump-activation needs a checkpoint whose variant "
                         "has a segmentation branch (GS or GS_parallel)")
    image = read_ppm(args.image)
    with T.no_grad():
        out = net.forward(Tensor(image))
    seg = out.seg
    source = out.source_features[0].data
    z = seg.activation.data
    xact = T.mul(out.source_features[0], seg.activation).data \
        if net.cfg.variant == "GS_parallel" else seg.activated.data
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_ppm(image, outdir / "input.ppm")
    k = min(args.channels, source.shape[0])
    for c in range(k):
        write_pgm(_to_gray(source[c]), outdir / f"features_{c:02d}.pgm")
        write_pgm(_to_gray(z[c]), outdir / f"activation_{c:02d}.pgm")
        write_pgm(_to_gray(xact[c]), outdir / f"activated_{c:02d}.pgm")
    print(f"wrote input + {k} channel slices of features/activation/activated "
          f"to {outdir}")
    return 0


def cmd_gen_data(args):
    samples = gen_synthetic(args.seed, args.count, classes=args.classes,
                            size=args.size)
    manifest = save_dataset(samples, args.out, class_names_for(args.classes))
    print(f"wrote {args.count} samples; manifest: {manifest}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="des",
                                description="toy single-shot detector with "
                                            "semantic feature enrichment")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset manifest JSON")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="detect objects in one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True, help="binary P6 PPM")
    i.add_argument("--score-thresh", type=float, default=0.3)
    i.add_argument("--overlay", help="write detections drawn over the input")
    i.set_defaults(fn=cmd_infer)

    a = sub.add_parser("ablate", help="train/evaluate every variant arm")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--data", help="manifest (default: generate synthetic data)")
    a.add_argument("--train-count", type=int, default=500)
    a.add_argument("--eval-count", type=int, default=100)
    a.add_argument("--out", help="write the result table as JSON")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--points", type=int, default=5)
    g.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("rasterize-gt", help="boxes -> weak label grid (PGM)")
    r.add_argument("--annotation", required=True, help="VOC XML or JSON boxes")
    r.add_argument("--grid-h", type=int, required=True)
    r.add_argument("--grid-w", type=int, required=True)
    r.add_argument("--classes", help="comma-separated class names")
    r.add_argument("--out", required=True, help="output PGM path")
    r.set_defaults(fn=cmd_rasterize_gt)

    d = sub.add_parser("dump-activation",
                       help="write feature/activation channel slices as PGM")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--channels", type=int, default=8)
    d.set_defaults(fn=cmd_dump_activation)

    n = sub.add_parser("gen-data", help="materialize a synthetic dataset")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--count", type=int, required=True)
    n.add_argument("--classes", type=int, default=3)
    n.add_argument("--size", type=int, default=64)
    n.add_argument("--out", required=True)
    n.set_defaults(fn=cmd_gen_data)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

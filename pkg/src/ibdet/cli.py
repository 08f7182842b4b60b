"""Command-line interface.

Subcommands: train, eval, infer, bench, sweep, gen-data.  All commands honor
a fixed seed and exit 0 on success; failures print one `error: ...` line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (apply_overrides, build_run_config, load_config_file,
                     run_config_to_kv)
from .data import CLASS_NAMES, Scene, SceneConfig, scene_for_index, write_dataset
from .metrics import nms
from .train import (load_model_from_checkpoint, run_bench, run_eval,
                    run_sweep, run_train)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ibdet",
        description="Binarized one-stage detector with information-bottleneck "
                    "training, at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", required=True, help="key-value config file")
    t.add_argument("--seed", type=int, help="override run.seed")
    t.add_argument("--out", help="override run.out output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--score", type=float, default=0.5)
    e.add_argument("--ap-mode", choices=("allpoint", "11point"),
                   default="allpoint")
    e.add_argument("--nms", type=float, default=0.5)
    e.add_argument("--out", help="report directory (default: checkpoint dir)")
    e.add_argument("--bitpacked", action="store_true")

    i = sub.add_parser("infer", help="detect objects in one PPM image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--bitpacked", action="store_true")
    i.add_argument("--nms", type=float, default=0.5)
    i.add_argument("--score", type=float, default=0.0,
                   help="only print detections at or above this score")
    i.add_argument("--fig", help="also render the detections to this PNG")

    b = sub.add_parser("bench", help="throughput benchmark")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--mode", choices=("float", "bitpacked", "both"),
                   default="both")
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--batch", type=int, default=8)

    s = sub.add_parser("sweep", help="beta/gamma ablation sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--beta", required=True, help="comma-separated values")
    s.add_argument("--gamma", required=True, help="comma-separated values")
    s.add_argument("--seeds", required=True, help="comma-separated values")
    s.add_argument("--out", help="sweep output directory")
    s.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--image-size", type=int, default=48)
    g.add_argument("--grid", type=int, default=6)
    return p


def _load_cfg(args) -> "RunConfig":
    kv = load_config_file(args.config)
    kv = apply_overrides(kv, args.overrides)
    if getattr(args, "seed", None) is not None:
        kv["run.seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        kv["run.out"] = args.out
    return build_run_config(kv)


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    result = run_train(cfg, resume=args.resume)
    print(f"run complete: {result.out_dir}")
    print(f"config hash: {result.config_hash}")
    last_test = [r for r in result.epoch_rows if r["split"] == "test"]
    if last_test:
        r = last_test[-1]
        print(f"final test mAP@0.5: {r['map']:.4f}  fp: {r['fp']}  fn: {r['fn']}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    _report, _comp, lines = run_eval(
        args.ckpt, args.data, iou_thresh=args.iou, score_thresh=args.score,
        ap_mode=args.ap_mode, nms_iou=args.nms, out_dir=args.out,
        use_bitpacked=args.bitpacked)
    for line in lines:
        print(line)
    return 0


def _cmd_infer(args) -> int:
    from .data import read_ppm

    model, cfg, _ = load_model_from_checkpoint(args.ckpt)
    image = read_ppm(args.image)
    dets = model.forward_infer(image[None], use_bitpacked=args.bitpacked)[0]
    dets = [d for d in nms(dets, args.nms) if d.score >= args.score]
    for d in dets:
        name = (CLASS_NAMES[d.class_id - 1]
                if d.class_id - 1 < len(CLASS_NAMES) else str(d.class_id))
        print(f"{name} {d.class_id} {d.score:.4f} "
              f"{d.box[0]:.2f} {d.box[1]:.2f} {d.box[2]:.2f} {d.box[3]:.2f}")
    if args.fig:
        from .plots import draw_detections
        draw_detections(image, dets, args.fig, class_names=CLASS_NAMES)
        print(f"figure: {args.fig}")
    return 0


def _cmd_bench(args) -> int:
    report = run_bench(args.ckpt, mode=args.mode, iters=args.iters,
                       batch=args.batch)
    for line in report.lines():
        print(line)
    return 0


def _parse_list(text: str, conv) -> list:
    return [conv(v) for v in text.split(",") if v.strip()]


def _cmd_sweep(args) -> int:
    kv = load_config_file(args.config)
    kv = apply_overrides(kv, args.overrides)
    cfg = build_run_config(kv)
    betas = _parse_list(args.beta, float)
    gammas = _parse_list(args.gamma, float)
    seeds = _parse_list(args.seeds, int)
    rows = run_sweep(cfg, betas, gammas, seeds, out_dir=args.out)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    print(f"sweep rows: {len(rows)}")
    print(f"sweep csv: {out / 'sweep.csv'}")
    return 0


def _cmd_gen_data(args) -> int:
    scfg = SceneConfig(image_size=args.image_size, num_classes=args.classes,
                       grid=args.grid)
    scenes: list[Scene] = [scene_for_index(args.seed, i, scfg)
                           for i in range(args.count)]
    write_dataset(scenes, args.out, split=args.split, seed=args.seed,
                  class_names=CLASS_NAMES[:args.classes])
    n_obj = int(np.sum([s.n_objects for s in scenes]))
    print(f"wrote {len(scenes)} scenes ({n_obj} objects) to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "bench": _cmd_bench,
    "sweep": _cmd_sweep,
    "gen-data": _cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

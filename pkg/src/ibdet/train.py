"""Drivers: training loop, evaluation, benchmark, and ablation sweep.

All randomness derives from (seed, epoch) seed sequences, so runs are
reproducible record-by-record and resuming from a checkpoint continues the
uninterrupted trajectory bit-exactly.  Reports land in the run directory as
CSV files plus rendered PNG figures.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import plots
from .checkpoint import load_checkpoint, rng_to_words, save_checkpoint
from .config import (RunConfig, build_run_config, config_hash,
                     parse_config_text, serialize_run_config)
from .data import SceneConfig, augment, read_dataset, scene_for_index
from .loss import detector_objective, info_xf, class_term, loc_term, \
    sparse_prior_loss, total_objective
from .binary import FeatureDistribution
from .metrics import (ComplexityReport, EvalReport, complexity_report,
                      evaluate_detections, info_plane, labels_for_scenes,
                      precision_recall_curves)
from .model import DetectorModel, assign_blocks
from .optim import AdamState, adam_step, lr_at_epoch
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch,split,info_xf,class_term,loc_term,sparse_term,"
                  "total,map,fp,fn,ixf_proxy,ify_proxy")
STEPS_HEADER = "epoch,step,info_xf,class_term,loc_term,sparse_term,total"
SWEEP_HEADER = "beta,gamma,seed,map,ify_proxy,fp,fn,config_hash"

_INIT_KEY = 7_000_001  # spawn key reserved for parameter initialization
_BENCH_SEED = 424_242

_EVAL_BATCH = 64


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_KEY,)))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def _fmt_row(values) -> str:
    parts = []
    for v in values:
        if isinstance(v, (float, np.floating)):
            parts.append(repr(float(v)))
        elif isinstance(v, (int, np.integer)):
            parts.append(str(int(v)))
        else:
            parts.append(str(v))
    return ",".join(parts)


@dataclass
class TrainResult:
    final_checkpoint: Path
    out_dir: Path
    epoch_rows: list[dict]
    config_hash: str


def _checkpoint_entries(cfg_text: str, model: DetectorModel, state: AdamState,
                        next_epoch: int, seed: int) -> dict[str, object]:
    entries: dict[str, object] = {
        "config": cfg_text,
        "epoch": next_epoch,
        "adam_step": state.step,
        "rng": rng_to_words(_epoch_rng(seed, next_epoch)),
    }
    for name, p in model.parameters().items():
        entries[f"param/{name}"] = p.data
        entries[f"adam_m/{name}"] = state.m[name]
        entries[f"adam_v/{name}"] = state.v[name]
    for name, buf in model.buffers().items():
        entries[f"buffer/{name}"] = buf
    return entries


def _restore_model(model: DetectorModel, entries: dict[str, object],
                   state: AdamState | None = None) -> None:
    params = model.parameters()
    for name, p in params.items():
        np.copyto(p.data, entries[f"param/{name}"])
        if state is not None:
            np.copyto(state.m[name], entries[f"adam_m/{name}"])
            np.copyto(state.v[name], entries[f"adam_v/{name}"])
    for name, buf in model.buffers().items():
        np.copyto(buf, entries[f"buffer/{name}"])
    if state is not None:
        state.step = int(np.asarray(entries["adam_step"]))


def load_model_from_checkpoint(path: Path | str
                               ) -> tuple[DetectorModel, RunConfig, dict]:
    entries = load_checkpoint(path)
    cfg = build_run_config(parse_config_text(entries["config"]))
    model = DetectorModel(cfg.detector, _init_rng(cfg.seed))
    _restore_model(model, entries)
    return model, cfg, entries


def _infer_dataset(model: DetectorModel, scenes, nms_iou: float,
                   use_bitpacked: bool = False) -> list[list]:
    from .metrics import nms
    dets = []
    for lo in range(0, len(scenes), _EVAL_BATCH):
        chunk = scenes[lo:lo + _EVAL_BATCH]
        images = np.stack([s.image for s in chunk])
        for per_image in model.forward_infer(images, use_bitpacked=use_bitpacked):
            dets.append(nms(per_image, nms_iou))
    return dets


def _eval_breakdown(model: DetectorModel, scenes, labels, cfg: RunConfig
                    ) -> tuple[float, float, float, float, float]:
    """Deterministic eval-mode loss terms on a capped image sample."""
    k = min(cfg.info_samples, len(scenes))
    images = np.stack([s.image for s in scenes[:k]])
    outs = model.eval_forward(images)
    info = info_xf(FeatureDistribution(Tensor(outs.feature_probs)))
    cls = class_term(Tensor(outs.class_logits), labels[:k])
    loc = loc_term(Tensor(outs.loc_mean), Tensor(outs.loc_logvar), labels[:k])
    sparse = sparse_prior_loss(Tensor(outs.class_logits), cfg.loss)
    _, bd = total_objective(info, cls, loc, sparse, cfg.loss)
    return bd.info_xf, bd.class_term, bd.loc_term, bd.sparse_term, bd.total


def _split_row(model: DetectorModel, scenes, labels, cfg: RunConfig,
               epoch: int, split: str,
               loss_fields: tuple[float, float, float, float, float] | None
               ) -> tuple[dict, EvalReport]:
    dets = _infer_dataset(model, scenes, cfg.nms_iou)
    gts = [(s.boxes, s.classes) for s in scenes]
    report = evaluate_detections(dets, gts, iou_thresh=cfg.eval_iou,
                                 score_thresh=cfg.eval_score,
                                 ap_mode=cfg.ap_mode)
    k = min(cfg.info_samples, len(scenes))
    sample = np.stack([s.image for s in scenes[:k]])
    point = info_plane(model, sample, labels[:k], epoch=epoch)
    if loss_fields is None:
        loss_fields = _eval_breakdown(model, scenes, labels, cfg)
    row = {
        "epoch": epoch, "split": split,
        "info_xf": loss_fields[0], "class_term": loss_fields[1],
        "loc_term": loss_fields[2], "sparse_term": loss_fields[3],
        "total": loss_fields[4],
        "map": report.map, "fp": report.fp, "fn": report.fn,
        "ixf_proxy": point.ixf_proxy, "ify_proxy": point.ify_proxy,
    }
    return row, report


def _row_line(row: dict) -> str:
    return _fmt_row([row["epoch"], row["split"], row["info_xf"],
                     row["class_term"], row["loc_term"], row["sparse_term"],
                     row["total"], row["map"], row["fp"], row["fn"],
                     row["ixf_proxy"], row["ify_proxy"]])


def run_train(cfg: RunConfig, resume: Path | str | None = None,
              stop_after: int | None = None) -> TrainResult:
    """Train per the run config; emits metrics.csv, steps.csv, per-epoch
    checkpoints, final.bdet, and report figures into the output directory."""
    out = Path(cfg.out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    cfg_text = serialize_run_config(cfg)
    (out / "config.txt").write_text(cfg_text)
    chash = config_hash(cfg)

    _, train_scenes = read_dataset(cfg.train_data)
    _, test_scenes = read_dataset(cfg.test_data)
    if not train_scenes:
        raise ValueError(f"empty training dataset: {cfg.train_data}")

    model = DetectorModel(cfg.detector, _init_rng(cfg.seed))
    params = model.parameters()
    state = AdamState.for_params(params)
    binarized = set(model.binarized_weight_names())

    metrics_path = out / "metrics.csv"
    steps_path = out / "steps.csv"
    start_epoch = 0
    if resume is not None:
        entries = load_checkpoint(resume)
        if entries["config"] != cfg_text:
            theirs = config_hash(build_run_config(parse_config_text(entries["config"])))
            raise ValueError(f"checkpoint config hash {theirs} does not match "
                             f"run config hash {chash}")
        _restore_model(model, entries, state)
        start_epoch = int(np.asarray(entries["epoch"]))
        logger.info("resuming at epoch %d from %s", start_epoch, resume)
        if not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n")
        if not steps_path.exists():
            steps_path.write_text(STEPS_HEADER + "\n")
    else:
        metrics_path.write_text(METRICS_HEADER + "\n")
        steps_path.write_text(STEPS_HEADER + "\n")

    test_labels = labels_for_scenes(test_scenes, model.anchors)
    train_labels = labels_for_scenes(train_scenes, model.anchors)

    epoch_rows: list[dict] = []
    global_step = state.step
    final_entries = None
    for epoch in range(start_epoch, cfg.optim.epochs):
        t0 = time.perf_counter()
        rng_e = _epoch_rng(cfg.seed, epoch)
        lr = lr_at_epoch(cfg.optim.lr, epoch, cfg.optim.decay_epochs,
                         cfg.optim.decay_factor)
        order = rng_e.permutation(len(train_scenes))
        sums = np.zeros(5)
        n_ok = 0
        step_lines = []
        for lo in range(0, order.size, cfg.optim.batch_size):
            idx = order[lo:lo + cfg.optim.batch_size]
            batch = [augment(train_scenes[i], rng_e,
                             flip_prob=cfg.augment.flip_prob,
                             jitter=cfg.augment.jitter) for i in idx]
            images = np.stack([s.image for s in batch])
            labels = [assign_blocks(s.boxes, s.classes, model.anchors)
                      for s in batch]
            for p in params.values():
                p.zero_grad()
            global_step += 1
            try:
                total, bd, _ = detector_objective(model, images, labels,
                                                  cfg.loss, rng=rng_e)
                grad_map = backward(total, params.values())
            except FloatingPointError as exc:
                logger.warning("epoch %d step %d skipped: %s", epoch,
                               global_step, exc)
                continue
            grads = {name: grad_map[p] for name, p in params.items()}
            adam_step(params, grads, state, lr, cfg.optim.beta1,
                      cfg.optim.beta2, cfg.optim.eps)
            for name in binarized:
                np.clip(params[name].data, -1.0, 1.0, out=params[name].data)
            sums += (bd.info_xf, bd.class_term, bd.loc_term, bd.sparse_term,
                     bd.total)
            n_ok += 1
            step_lines.append(_fmt_row([epoch, global_step, bd.info_xf,
                                        bd.class_term, bd.loc_term,
                                        bd.sparse_term, bd.total]))
        if n_ok == 0:
            raise RuntimeError(f"epoch {epoch}: non-finite loss on every step "
                               f"(lr={lr}); aborting")
        means = sums / n_ok

        train_row, _ = _split_row(model, train_scenes, train_labels, cfg,
                                  epoch, "train", tuple(means))
        test_row, test_report = _split_row(model, test_scenes, test_labels,
                                           cfg, epoch, "test", None)
        epoch_rows.extend([train_row, test_row])
        with metrics_path.open("a") as fh:
            fh.write(_row_line(train_row) + "\n")
            fh.write(_row_line(test_row) + "\n")
        with steps_path.open("a") as fh:
            fh.write("\n".join(step_lines) + "\n")

        final_entries = _checkpoint_entries(cfg_text, model, state,
                                            epoch + 1, cfg.seed)
        save_checkpoint(out / f"ckpt_epoch_{epoch + 1:03d}.bdet", final_entries)
        logger.info("epoch %d: lr=%g total=%.4f test mAP=%.3f fp=%d fn=%d (%.1fs)",
                    epoch, lr, means[4], test_report.map, test_report.fp,
                    test_report.fn, time.perf_counter() - t0)
        if stop_after is not None and epoch + 1 >= stop_after:
            break

    if final_entries is None:  # resumed past the last epoch; re-emit state
        final_entries = _checkpoint_entries(cfg_text, model, state,
                                            start_epoch, cfg.seed)
    final_path = out / "final.bdet"
    save_checkpoint(final_path, final_entries)

    all_rows = _read_metric_rows(metrics_path)
    plots.plot_training_curves(all_rows, out / "figures" / "training_curves.png")
    plots.plot_info_plane(all_rows, out / "figures" / "info_plane.png")
    return TrainResult(final_checkpoint=final_path, out_dir=out,
                       epoch_rows=epoch_rows, config_hash=chash)


def _read_metric_rows(path: Path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = line.split(",")
        row = {}
        for key, value in zip(header, fields):
            if key == "split":
                row[key] = value
            elif key in ("epoch", "fp", "fn"):
                row[key] = int(value)
            else:
                row[key] = float(value)
        rows.append(row)
    return rows


# -- evaluation -------------------------------------------------------------------


def run_eval(ckpt: Path | str, data_dir: Path | str,
             iou_thresh: float = 0.5, score_thresh: float = 0.5,
             ap_mode: str = "allpoint", nms_iou: float = 0.5,
             out_dir: Path | str | None = None,
             use_bitpacked: bool = False
             ) -> tuple[EvalReport, ComplexityReport, list[str]]:
    """Evaluate a checkpoint on a dataset; appends a metrics row, renders the
    precision-recall figure, and returns printable report lines."""
    model, cfg, entries = load_model_from_checkpoint(ckpt)
    cfg = replace(cfg, eval_iou=iou_thresh, eval_score=score_thresh,
                  ap_mode=ap_mode, nms_iou=nms_iou)
    manifest, scenes = read_dataset(data_dir)
    labels = labels_for_scenes(scenes, model.anchors)
    epoch = int(np.asarray(entries["epoch"]))

    dets = _infer_dataset(model, scenes, nms_iou, use_bitpacked=use_bitpacked)
    gts = [(s.boxes, s.classes) for s in scenes]
    report = evaluate_detections(dets, gts, iou_thresh=iou_thresh,
                                 score_thresh=score_thresh, ap_mode=ap_mode)
    comp = complexity_report(model)

    out = Path(out_dir) if out_dir is not None else Path(ckpt).parent
    (out / "figures").mkdir(parents=True, exist_ok=True)
    loss_fields = _eval_breakdown(model, scenes, labels, cfg)
    k = min(cfg.info_samples, len(scenes))
    sample = np.stack([s.image for s in scenes[:k]])
    point = info_plane(model, sample, labels[:k], epoch=epoch)
    row = {"epoch": epoch, "split": "eval",
           "info_xf": loss_fields[0], "class_term": loss_fields[1],
           "loc_term": loss_fields[2], "sparse_term": loss_fields[3],
           "total": loss_fields[4], "map": report.map,
           "fp": report.fp, "fn": report.fn,
           "ixf_proxy": point.ixf_proxy, "ify_proxy": point.ify_proxy}
    metrics_path = out / "metrics.csv"
    if not metrics_path.exists():
        metrics_path.write_text(METRICS_HEADER + "\n")
    with metrics_path.open("a") as fh:
        fh.write(_row_line(row) + "\n")

    curves = precision_recall_curves(dets, gts, iou_thresh=iou_thresh)
    plots.plot_pr_curves(curves, report.per_class_ap,
                         out / "figures" / "pr_curves.png",
                         class_names=manifest.class_names)

    lines = [f"images: {report.n_images}  groundtruth: {report.n_groundtruth}",
             f"mAP@{iou_thresh:g} ({ap_mode}): {report.map:.4f}"]
    for cls in sorted(report.per_class_ap):
        name = (manifest.class_names[cls - 1]
                if cls - 1 < len(manifest.class_names) else str(cls))
        lines.append(f"  AP[{name}]: {report.per_class_ap[cls]:.4f}")
    if report.excluded_classes:
        lines.append(f"  classes without groundtruth (excluded): "
                     f"{report.excluded_classes}")
    lines.append(f"TP/FP/FN @score>={score_thresh:g}: "
                 f"{report.tp}/{report.fp}/{report.fn}")
    lines.append(f"detections per image histogram: {report.det_histogram}")
    lines.append(f"model storage: {comp.total_bytes / 1024:.1f} KiB, "
                 f"per-image FLOPs: {comp.total_flops / 1e6:.3f} M")
    return report, comp, lines


# -- benchmark --------------------------------------------------------------------


@dataclass
class BenchReport:
    images_per_sec: dict[str, float]
    flops_per_image: dict[str, float]
    flop_ratio: float
    time_ratio: float | None
    regression: bool | None
    iters: int
    batch: int

    def lines(self) -> list[str]:
        out = []
        for mode, ips in self.images_per_sec.items():
            out.append(f"{mode}: {ips:.1f} images/s, "
                       f"{self.flops_per_image[mode] / 1e6:.3f} MFLOPs/image")
        out.append(f"FLOP ratio (float/bitpacked): {self.flop_ratio:.2f}x")
        if self.time_ratio is not None:
            out.append(f"wall-clock ratio (float/bitpacked): {self.time_ratio:.2f}x")
        if self.regression:
            out.append("WARNING: performance regression - bitpacked inference "
                       "is not faster than the float path")
        return out


def run_bench(ckpt: Path | str, mode: str = "both", iters: int = 10,
              batch: int = 8) -> BenchReport:
    """Throughput benchmark; refuses to time anything unless float and
    bitpacked inference agree detection-for-detection first."""
    if iters < 10:
        raise ValueError("bench: iters must be at least 10")
    if mode not in ("float", "bitpacked", "both"):
        raise ValueError(f"bench: unknown mode {mode!r}")
    model, cfg, _ = load_model_from_checkpoint(ckpt)
    if mode != "float" and not cfg.detector.binarize:
        raise ValueError("bench: bitpacked mode needs a binarized model")

    scfg = SceneConfig(image_size=cfg.detector.image_size,
                       num_classes=cfg.detector.num_classes,
                       grid=cfg.detector.grid)
    images = np.stack([scene_for_index(_BENCH_SEED, i, scfg).image
                       for i in range(batch)])

    if cfg.detector.binarize:
        det_f = model.forward_infer(images, use_bitpacked=False)
        det_b = model.forward_infer(images, use_bitpacked=True)
        for df, db in zip(det_f, det_b):
            same = (len(df) == len(db) and all(
                a.class_id == b.class_id and a.score == b.score
                and np.array_equal(a.box, b.box) for a, b in zip(df, db)))
            if not same:
                raise RuntimeError("bench refused: float and bitpacked "
                                   "detections disagree")

    flops = {
        "float": complexity_report(model, force_real=True).total_flops,
        "bitpacked": complexity_report(model).total_flops,
    }
    times: dict[str, float] = {}
    modes = ("float", "bitpacked") if mode == "both" else (mode,)
    for m in modes:
        use_bp = m == "bitpacked"
        for _ in range(2):  # warmup
            model.forward_infer(images, use_bitpacked=use_bp)
        t0 = time.perf_counter()
        for _ in range(iters):
            model.forward_infer(images, use_bitpacked=use_bp)
        times[m] = time.perf_counter() - t0

    ips = {m: iters * batch / t for m, t in times.items()}
    time_ratio = (times["float"] / times["bitpacked"]
                  if len(times) == 2 else None)
    regression = (times["bitpacked"] >= times["float"]
                  if len(times) == 2 else None)
    return BenchReport(images_per_sec=ips,
                       flops_per_image={m: flops[m] for m in modes},
                       flop_ratio=flops["float"] / flops["bitpacked"],
                       time_ratio=time_ratio, regression=regression,
                       iters=iters, batch=batch)


# -- ablation sweep ---------------------------------------------------------------


def run_sweep(base_cfg: RunConfig, betas: list[float], gammas: list[float],
              seeds: list[int], out_dir: Path | str | None = None) -> list[dict]:
    """One full training per (beta, gamma, seed); emits sweep.csv plus the
    four-panel trend figure.  Individual failures are recorded as NaN rows and
    the sweep continues."""
    if not betas or not gammas or not seeds:
        raise ValueError("sweep: beta/gamma/seed grids must be non-empty")
    out = Path(out_dir) if out_dir is not None else Path(base_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for beta in betas:
        for gamma in gammas:
            for seed in seeds:
                sub = out / f"beta{beta:g}_gamma{gamma:g}_seed{seed}"
                cfg_i = replace(
                    base_cfg, seed=seed, out_dir=str(sub),
                    loss=replace(base_cfg.loss, beta=beta, gamma=gamma))
                row = {"beta": beta, "gamma": gamma, "seed": seed,
                       "map": float("nan"), "ify_proxy": float("nan"),
                       "fp": float("nan"), "fn": float("nan"),
                       "config_hash": config_hash(cfg_i)}
                try:
                    result = run_train(cfg_i)
                    test_rows = [r for r in result.epoch_rows
                                 if r["split"] == "test"]
                    last = test_rows[-1]
                    row.update(map=last["map"], ify_proxy=last["ify_proxy"],
                               fp=float(last["fp"]), fn=float(last["fn"]))
                except Exception as exc:  # record failure, keep sweeping
                    logger.error("sweep run beta=%g gamma=%g seed=%d failed: %s",
                                 beta, gamma, seed, exc)
                rows.append(row)
    csv_path = out / "sweep.csv"
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(_fmt_row([r["beta"], r["gamma"], r["seed"], r["map"],
                               r["ify_proxy"], r["fp"], r["fn"],
                               r["config_hash"]]))
    csv_path.write_text("\n".join(lines) + "\n")
    (out / "figures").mkdir(exist_ok=True)
    plots.plot_sweep_trends(rows, out / "figures" / "sweep_trends.png")
    return rows

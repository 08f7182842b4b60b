"""Detection evaluation: IoU, per-class NMS, greedy matching, AP/mAP,
FP/FN counts, model complexity accounting, and information-plane proxies.

AP defaults to all-point interpolation (area under the precision envelope);
the 11-point PASCAL variant is available by flag.  Binary storage is counted
at 1 bit per weight and binary multiply-accumulates at 1/64 of a float MAC
(with 2 FLOPs per MAC), so per-layer binarized-vs-real ratios are exactly
32x for storage and 64x for compute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import loss as loss_mod
from .model import BlockLabels, Detection, DetectorModel, assign_blocks
from .tensor import Tensor


def iou(a, b) -> float:
    """Intersection over union of two corner boxes; degenerate boxes give 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return float(inter / union) if union > 0 else 0.0


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression by descending score; a detection is
    dropped when it overlaps an already-kept same-class box strictly above
    the threshold.  Score ties keep input (anchor) order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"nms: iou_thresh must lie in (0, 1), got {iou_thresh}")
    keep: list[Detection] = []
    classes = sorted({d.class_id for d in dets})
    for cls in classes:
        idx = [i for i, d in enumerate(dets) if d.class_id == cls]
        scores = np.array([dets[i].score for i in idx])
        order = np.argsort(-scores, kind="stable")
        kept_boxes: list[np.ndarray] = []
        for o in order:
            d = dets[idx[o]]
            if all(iou(d.box, kb) <= iou_thresh for kb in kept_boxes):
                keep.append(d)
                kept_boxes.append(d.box)
    keep.sort(key=lambda d: -d.score)
    return keep


def match_and_count(dets: list[Detection], gt_boxes: np.ndarray,
                    gt_classes: np.ndarray, iou_thresh: float = 0.5,
                    score_thresh: float = 0.5) -> tuple[int, int, int]:
    """Greedy TP/FP/FN counting on one image (detections post-NMS).

    Descending-score detections claim the best unmatched same-class
    groundtruth at IoU >= iou_thresh; the rest are false positives, and
    unmatched groundtruth are false negatives.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    cand = [d for d in dets if d.score >= score_thresh]
    order = np.argsort(-np.array([d.score for d in cand]), kind="stable") \
        if cand else np.array([], dtype=int)
    matched = np.zeros(gt_classes.size, dtype=bool)
    tp = fp = 0
    for o in order:
        d = cand[o]
        best_iou, best_j = 0.0, -1
        for j in range(gt_classes.size):
            if matched[j] or gt_classes[j] != d.class_id:
                continue
            v = iou(d.box, gt_boxes[j])
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = True
            tp += 1
        else:
            fp += 1
    fn = int((~matched).sum())
    return tp, fp, fn


def _ap_from_pr(recall: np.ndarray, precision: np.ndarray, mode: str) -> float:
    if mode == "allpoint":
        r = np.concatenate([[0.0], recall, [recall[-1] if recall.size else 0.0]])
        p = np.concatenate([[0.0], precision, [0.0]])
        for i in range(p.size - 2, -1, -1):
            p[i] = max(p[i], p[i + 1])
        idx = np.nonzero(r[1:] != r[:-1])[0]
        return float(((r[idx + 1] - r[idx]) * p[idx + 1]).sum())
    if mode == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            ap += precision[mask].max() if mask.any() else 0.0
        return ap / 11.0
    raise ValueError(f"unknown AP mode {mode!r}")


def _class_pr(dets_per_image: list[list[Detection]],
              gt_per_image: list[tuple[np.ndarray, np.ndarray]],
              cls: int, iou_thresh: float,
              n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall/precision arrays for one class, matched greedily in global
    descending score order (stable on (image, detection) order for ties)."""
    rows = []  # (score, image, box)
    for img, dets in enumerate(dets_per_image):
        for d in dets:
            if d.class_id == cls:
                rows.append((d.score, img, d.box))
    if not rows:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-np.array([r[0] for r in rows]), kind="stable")
    matched = {img: np.zeros(np.atleast_1d(gc).size, dtype=bool)
               for img, (_, gc) in enumerate(gt_per_image)}
    tp = np.zeros(len(rows))
    fp = np.zeros(len(rows))
    for rank, o in enumerate(order):
        _, img, box = rows[o]
        gb, gc = gt_per_image[img]
        gb = np.asarray(gb, dtype=float).reshape(-1, 4)
        gc = np.atleast_1d(gc)
        best_iou, best_j = 0.0, -1
        for j in range(gc.size):
            if gc[j] != cls or matched[img][j]:
                continue
            v = iou(box, gb[j])
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[img][best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    tpc = np.cumsum(tp)
    fpc = np.cumsum(fp)
    recall = tpc / n_gt
    precision = tpc / np.maximum(tpc + fpc, 1)
    return recall, precision


def _gt_counts(gt_per_image, dets_per_image) -> dict[int, int]:
    all_classes = sorted(
        {int(c) for _, gc in gt_per_image for c in np.atleast_1d(gc)}
        | {d.class_id for dets in dets_per_image for d in dets})
    counts = {cls: 0 for cls in all_classes}
    for _, gc in gt_per_image:
        for c in np.atleast_1d(gc):
            counts[int(c)] += 1
    return counts


def precision_recall_curves(dets_per_image, gt_per_image, iou_thresh: float = 0.5
                            ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-class (recall, precision) arrays for classes with groundtruth."""
    counts = _gt_counts(gt_per_image, dets_per_image)
    return {cls: _class_pr(dets_per_image, gt_per_image, cls, iou_thresh, n)
            for cls, n in counts.items() if n > 0}


def average_precision(dets_per_image: list[list[Detection]],
                      gt_per_image: list[tuple[np.ndarray, np.ndarray]],
                      iou_thresh: float = 0.5,
                      mode: str = "allpoint") -> tuple[dict[int, float], float, list[int]]:
    """Per-class AP over a full test set plus the unweighted class mean.

    Returns (per-class AP, mAP, classes excluded for having no groundtruth).
    """
    counts = _gt_counts(gt_per_image, dets_per_image)
    per_class: dict[int, float] = {}
    excluded: list[int] = []
    for cls, n_gt in counts.items():
        if n_gt == 0:
            excluded.append(cls)
            continue
        recall, precision = _class_pr(dets_per_image, gt_per_image, cls,
                                      iou_thresh, n_gt)
        per_class[cls] = _ap_from_pr(recall, precision, mode) if recall.size else 0.0
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean, excluded


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    tp: int
    fp: int
    fn: int
    n_images: int
    n_groundtruth: int
    det_histogram: dict[int, int] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)
    ap_mode: str = "allpoint"
    iou_thresh: float = 0.5
    score_thresh: float = 0.5


def evaluate_detections(dets_per_image: list[list[Detection]],
                        gt_per_image: list[tuple[np.ndarray, np.ndarray]],
                        iou_thresh: float = 0.5, score_thresh: float = 0.5,
                        ap_mode: str = "allpoint") -> EvalReport:
    """Aggregate AP and threshold counts over a set of images."""
    per_class, mean, excluded = average_precision(
        dets_per_image, gt_per_image, iou_thresh=iou_thresh, mode=ap_mode)
    tp = fp = fn = 0
    hist: dict[int, int] = {}
    for dets, (gb, gc) in zip(dets_per_image, gt_per_image):
        t, f, n = match_and_count(dets, gb, gc, iou_thresh=iou_thresh,
                                  score_thresh=score_thresh)
        tp += t
        fp += f
        fn += n
        count = sum(1 for d in dets if d.score >= score_thresh)
        hist[count] = hist.get(count, 0) + 1
    n_gt = sum(np.atleast_1d(gc).size for _, gc in gt_per_image)
    return EvalReport(per_class_ap=per_class, map=mean, tp=tp, fp=fp, fn=fn,
                      n_images=len(dets_per_image), n_groundtruth=n_gt,
                      det_histogram=dict(sorted(hist.items())),
                      excluded_classes=excluded, ap_mode=ap_mode,
                      iou_thresh=iou_thresh, score_thresh=score_thresh)


# -- complexity accounting -------------------------------------------------------


@dataclass
class LayerComplexity:
    name: str
    binarized: bool
    weights: int
    bytes: float
    macs: int
    flops: float


@dataclass
class ComplexityReport:
    layers: list[LayerComplexity]
    total_bytes: float
    total_flops: float
    total_weights: int

    def by_name(self, name: str) -> LayerComplexity:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


_BINARY_MAC_DISCOUNT = 64.0
_FLOPS_PER_MAC = 2.0


def _conv_complexity(name: str, conv, in_hw: tuple[int, int],
                     force_real: bool = False) -> tuple[LayerComplexity, tuple[int, int]]:
    o, i, kh, kw = conv.weight.shape
    h, w = in_hw
    ho = (h + 2 * conv.pad - kh) // conv.stride + 1
    wo = (w + 2 * conv.pad - kw) // conv.stride + 1
    weights = o * i * kh * kw
    binarized = conv.binarized and not force_real
    bytes_ = weights / 8.0 if binarized else weights * 4.0
    macs = ho * wo * weights
    flops = macs * _FLOPS_PER_MAC / (_BINARY_MAC_DISCOUNT if binarized else 1.0)
    if conv.bias is not None:
        bytes_ += conv.bias.size * 4.0
    return LayerComplexity(name, binarized, weights, bytes_, macs, flops), (ho, wo)


def complexity_report(model: DetectorModel,
                      force_real: bool = False) -> ComplexityReport:
    """Per-layer storage/compute accounting for one input image.

    `force_real` prices every layer at full precision, which is what the
    float inference path of the benchmark executes.
    """
    cfg = model.config
    layers: list[LayerComplexity] = []
    hw = (cfg.image_size, cfg.image_size)
    for li, conv in enumerate(model.convs):
        layer, hw = _conv_complexity(f"backbone.conv{li}", conv, hw, force_real)
        layers.append(layer)
        bn = model.bns[li]
        if bn is not None:
            count = bn.gamma.size + bn.beta.size
            layers.append(LayerComplexity(f"backbone.bn{li}", False, count,
                                          count * 4.0, 0, 0.0))
    for li, proj in sorted(model.projections.items()):
        if proj is not None:
            layer, _ = _conv_complexity(f"shortcut.proj{li}", proj,
                                        _shape_before(model, li), force_real)
            layers.append(layer)
    for name, head in model._heads().items():
        layer, _ = _conv_complexity(f"head.{name}", head, hw, force_real)
        layers.append(layer)
    return ComplexityReport(
        layers=layers,
        total_bytes=sum(l.bytes for l in layers),
        total_flops=sum(l.flops for l in layers),
        total_weights=sum(l.weights for l in layers),
    )


def _shape_before(model: DetectorModel, layer_index: int) -> tuple[int, int]:
    hw = model.config.image_size
    for stride in model.config.strides[:layer_index]:
        hw = (hw + 2 - 3) // stride + 1
    return (hw, hw)


# -- information-plane proxies ----------------------------------------------------


@dataclass
class InfoPlanePoint:
    """Mutual-information proxies (nats) from the objective's own terms."""

    ixf_proxy: float
    ify_proxy: float
    epoch: int = -1


def info_plane(model: DetectorModel, images: np.ndarray,
               labels: list[BlockLabels], epoch: int = -1) -> InfoPlanePoint:
    """Deterministic eval-mode proxies on a sample of images.

    ixf is the mean feature-compression term; ify is the mean task
    log-likelihood shifted by the constant prior log-densities (uniform class
    prior, standard-normal offset prior) so that larger means more
    task-relevant information.
    """
    outs = model.eval_forward(images)
    p = Tensor(outs.feature_probs)
    ixf = float(loss_mod.info_xf(loss_mod.FeatureDistribution(p)).data)

    cls = float(loss_mod.class_term(Tensor(outs.class_logits), labels).data)
    loc = float(loss_mod.loc_term(Tensor(outs.loc_mean),
                                  Tensor(outs.loc_logvar), labels).data)
    k = model.config.num_classes + 1
    cls_shift = math.log(k)

    offsets = [lab.offsets[lab.mask.astype(bool)] for lab in labels]
    offsets = np.concatenate(offsets) if offsets else np.zeros((0, 4))
    if offsets.size:
        prior_logpdf = float(np.mean(
            (-0.5 * loss_mod.LOG_2PI - 0.5 * offsets ** 2).sum(axis=1)))
    else:
        prior_logpdf = 0.0
    ify = (cls + cls_shift) + (loc - prior_logpdf)
    return InfoPlanePoint(ixf_proxy=ixf, ify_proxy=ify, epoch=epoch)


def labels_for_scenes(scenes, grid) -> list[BlockLabels]:
    """Assignment helper shared by training-time evaluation paths."""
    return [assign_blocks(s.boxes, s.classes, grid) for s in scenes]

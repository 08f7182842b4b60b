"""One-stage anchor-based detector with a binarized backbone.

Six backbone convolutions shrink the input to a grid of feature cells that
map one-to-one onto image blocks.  The first and last backbone layers and all
three heads stay real-valued; interior layers binarize weights and
activations through straight-through sign.  The last backbone layer emits the
per-element probability map of the binary high-level feature tensor, which is
sampled during training and taken as the sign of the pre-activation at
inference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import binary
from .binary import FeatureDistribution, bernoulli_st_sample, sign_ste
from .conv import batch_norm, conv2d, conv2d_forward
from .tensor import Tensor, as_tensor, sigmoid, tanh

logger = logging.getLogger(__name__)

LOC_DIM = 4  # (shift x, shift y, log-scale h, log-scale w)

# aspect ratios (h : w) of the per-block anchors: square, tall, wide
_ANCHOR_RATIOS = (1.0, 2.0, 0.5)


@dataclass
class DetectorConfig:
    image_size: int = 48
    num_classes: int = 3  # foreground classes; background is index 0
    grid: int = 6
    anchors_per_block: int = 3
    channels: tuple[int, ...] = (16, 32, 48, 64, 64, 32)
    strides: tuple[int, ...] = (2, 2, 1, 2, 1, 1)
    binarize: bool = True
    shortcut: bool = False
    anchor_scale: float = 1.5  # anchor base side, in block sides

    def __post_init__(self):
        if self.image_size % self.grid != 0:
            raise ValueError(f"grid {self.grid} does not divide image size "
                             f"{self.image_size} evenly")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if len(self.channels) < 3:
            raise ValueError("backbone needs at least 3 layers (real, binary, real)")
        if int(np.prod(self.strides)) != self.image_size // self.grid:
            raise ValueError("stride product must reduce the image to the block grid")
        if not 1 <= self.anchors_per_block <= len(_ANCHOR_RATIOS):
            raise ValueError(f"anchors_per_block must be in 1..{len(_ANCHOR_RATIOS)}")

    @property
    def block_size(self) -> int:
        return self.image_size // self.grid

    @property
    def n_blocks(self) -> int:
        return self.grid * self.grid

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    @property
    def binarize_flags(self) -> tuple[bool, ...]:
        """Per-layer weight/activation binarization; first and last stay real."""
        if not self.binarize:
            return tuple(False for _ in self.channels)
        return (False,) + tuple(True for _ in self.channels[1:-1]) + (False,)


@dataclass
class AnchorGrid:
    """Prior boxes: one set of anchors centered in every block."""

    image_size: int
    grid: int
    anchors_per_block: int
    centers: np.ndarray  # (n_blocks, A, 2) anchor centers (x, y), pixels
    sizes: np.ndarray    # (n_blocks, A, 2) anchor (h, w), pixels

    @property
    def n_blocks(self) -> int:
        return self.grid * self.grid

    @property
    def total(self) -> int:
        return self.n_blocks * self.anchors_per_block

    def anchor_box(self, block: int, anchor: int) -> np.ndarray:
        cx, cy = self.centers[block, anchor]
        h, w = self.sizes[block, anchor]
        return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def build_anchors(config: DetectorConfig) -> AnchorGrid:
    """Deterministic anchor grid: centers at block centers, aspect ratios
    {1:1, 2:1, 1:2} at anchor_scale x block side (equal areas)."""
    g = config.grid
    block = config.block_size
    a = config.anchors_per_block
    base = config.anchor_scale * block
    centers = np.zeros((g * g, a, 2))
    sizes = np.zeros((g * g, a, 2))
    for by in range(g):
        for bx in range(g):
            i = by * g + bx
            centers[i, :, 0] = (bx + 0.5) * block
            centers[i, :, 1] = (by + 0.5) * block
            for k in range(a):
                r = math.sqrt(_ANCHOR_RATIOS[k])
                sizes[i, k] = (base * r, base / r)
    return AnchorGrid(config.image_size, g, a, centers, sizes)


@dataclass
class BlockLabels:
    """Per-block groundtruth for one image."""

    classes: np.ndarray       # (n_blocks,) int, 0 = background
    mask: np.ndarray          # (n_blocks,) int in {0,1}
    anchor_index: np.ndarray  # (n_blocks,) matched anchor (0 for background)
    offsets: np.ndarray       # (n_blocks, 4) targets (dx, dy, dlog_h, dlog_w)

    @property
    def n_blocks(self) -> int:
        return self.classes.size

    @property
    def n_positive(self) -> int:
        return int(self.mask.sum())


def _box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def assign_blocks(boxes: np.ndarray, classes: np.ndarray, grid: AnchorGrid,
                  iou_pos: float = 0.5) -> BlockLabels:
    """Assign groundtruth to blocks by object center.

    The block containing an object center becomes positive with that class;
    the anchor with highest IoU to the box is matched and the offset targets
    invert the decode transform.  Every other block is background.  When two
    centers fall in one block the larger-area object wins (logged).  The
    `iou_pos` argument is kept for interface parity; positivity is decided by
    the center rule, not an IoU gate.
    """
    del iou_pos
    g = grid.grid
    block = grid.image_size // g
    n_blocks = grid.n_blocks
    labels = BlockLabels(
        classes=np.zeros(n_blocks, dtype=np.int64),
        mask=np.zeros(n_blocks, dtype=np.int64),
        anchor_index=np.zeros(n_blocks, dtype=np.int64),
        offsets=np.zeros((n_blocks, LOC_DIM)),
    )
    areas = np.zeros(n_blocks)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    for box, cls in zip(boxes, classes):
        if cls <= 0:
            raise ValueError(f"groundtruth class must be a positive id, got {cls}")
        cx = (box[0] + box[2]) / 2.0
        cy = (box[1] + box[3]) / 2.0
        h = box[3] - box[1]
        w = box[2] - box[0]
        bx = min(int(cx // block), g - 1)
        by = min(int(cy // block), g - 1)
        i = by * g + bx
        area = h * w
        if labels.mask[i]:
            # routine under augmentation jitter; larger-area object wins
            if area <= areas[i]:
                logger.debug("assign_blocks: second center in block %d; "
                             "keeping larger object", i)
                continue
            logger.debug("assign_blocks: second center in block %d; "
                         "replacing smaller object", i)
        ious = [_box_iou(box, grid.anchor_box(i, a))
                for a in range(grid.anchors_per_block)]
        best = int(np.argmax(ious))
        acx, acy = grid.centers[i, best]
        ah, aw = grid.sizes[i, best]
        labels.classes[i] = cls
        labels.mask[i] = 1
        labels.anchor_index[i] = best
        labels.offsets[i] = (cx - acx, cy - acy, math.log(h / ah), math.log(w / aw))
        areas[i] = area
    return labels


def decode_offsets(grid: AnchorGrid, l1, l2, block: int, anchor: int) -> np.ndarray:
    """Apply (shift, log-scale) offsets to an anchor and return the corner box
    clipped to the image."""
    cx, cy = grid.centers[block, anchor]
    h, w = grid.sizes[block, anchor]
    cx = cx + l1[0]
    cy = cy + l1[1]
    h = h * math.exp(l2[0])
    w = w * math.exp(l2[1])
    s = grid.image_size
    return np.array([
        min(max(cx - w / 2, 0.0), s),
        min(max(cy - h / 2, 0.0), s),
        min(max(cx + w / 2, 0.0), s),
        min(max(cy + h / 2, 0.0), s),
    ])


@dataclass
class Detection:
    """Decoded prediction: corner box (pixels), foreground class id, score."""

    box: np.ndarray
    class_id: int
    score: float


@dataclass
class HeadOutputs:
    """Posterior parameters for one batch, flattened block-major.

    Flat index over predictions is (block_y * grid + block_x) * A + anchor.
    """

    class_logits: Tensor  # (N, blocks*A, num_classes+1)
    loc_mean: Tensor      # (N, blocks*A, 4)
    loc_logvar: Tensor    # (N, blocks*A, 4)
    feature_dist: FeatureDistribution


@dataclass
class EvalOutputs:
    """Plain-array head outputs from the inference forward pass."""

    class_logits: np.ndarray
    loc_mean: np.ndarray
    loc_logvar: np.ndarray
    feature_probs: np.ndarray
    feature_sign: np.ndarray


class ConvLayer:
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int, stride: int, pad: int, binarized: bool,
                 with_bias: bool = False, weight_std: float | None = None):
        if weight_std is None:
            weight_std = math.sqrt(2.0 / (in_ch * kernel * kernel))
        w = rng.normal(0.0, weight_std, (out_ch, in_ch, kernel, kernel))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32),
                           requires_grad=True) if with_bias else None
        self.stride = stride
        self.pad = pad
        self.binarized = binarized

    @property
    def pad_value(self) -> float:
        return -1.0 if self.binarized else 0.0


class BatchNormLayer:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, eps=self.eps,
                          momentum=self.momentum, training=training)

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return ((x - self.running_mean.reshape(bshape)) * inv.reshape(bshape)
                * self.gamma.data.reshape(bshape) + self.beta.data.reshape(bshape))


_HEAD_STD = 0.01  # small head init keeps untrained scores near uniform


class DetectorModel:
    """Backbone + heads with per-layer binarization flags."""

    def __init__(self, config: DetectorConfig, rng: np.random.Generator):
        self.config = config
        self.anchors = build_anchors(config)
        flags = config.binarize_flags
        chans = (3,) + tuple(config.channels)
        last = config.n_layers - 1

        self.convs: list[ConvLayer] = []
        self.bns: list[BatchNormLayer | None] = []
        for li in range(config.n_layers):
            self.convs.append(ConvLayer(
                rng, chans[li], chans[li + 1], kernel=3,
                stride=config.strides[li], pad=1, binarized=flags[li],
                with_bias=(li == last)))
            self.bns.append(BatchNormLayer(chans[li + 1]) if li < last else None)

        # optional real-valued residual stream around interior layers
        self.projections: dict[int, ConvLayer | None] = {}
        if config.shortcut:
            for li in range(1, last):
                same = (chans[li] == chans[li + 1]) and config.strides[li] == 1
                self.projections[li] = None if same else ConvLayer(
                    rng, chans[li], chans[li + 1], kernel=1,
                    stride=config.strides[li], pad=0, binarized=False)

        a = config.anchors_per_block
        k = config.num_classes + 1
        feat = config.channels[-1]
        self.cls_head = ConvLayer(rng, feat, a * k, kernel=3, stride=1, pad=1,
                                  binarized=False, with_bias=True,
                                  weight_std=_HEAD_STD)
        self.loc_mu_head = ConvLayer(rng, feat, a * LOC_DIM, kernel=3, stride=1,
                                     pad=1, binarized=False, with_bias=True,
                                     weight_std=_HEAD_STD)
        self.loc_logvar_head = ConvLayer(rng, feat, a * LOC_DIM, kernel=3,
                                         stride=1, pad=1, binarized=False,
                                         with_bias=True, weight_std=_HEAD_STD)

    # -- parameter access ------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for li, conv in enumerate(self.convs):
            params[f"backbone.conv{li}.weight"] = conv.weight
            if conv.bias is not None:
                params[f"backbone.conv{li}.bias"] = conv.bias
        for li, bn in enumerate(self.bns):
            if bn is not None:
                params[f"backbone.bn{li}.gamma"] = bn.gamma
                params[f"backbone.bn{li}.beta"] = bn.beta
        for li, proj in sorted(self.projections.items()):
            if proj is not None:
                params[f"shortcut.proj{li}.weight"] = proj.weight
        for name, head in self._heads().items():
            params[f"head.{name}.weight"] = head.weight
            params[f"head.{name}.bias"] = head.bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for li, bn in enumerate(self.bns):
            if bn is not None:
                bufs[f"backbone.bn{li}.running_mean"] = bn.running_mean
                bufs[f"backbone.bn{li}.running_var"] = bn.running_var
        return bufs

    def _heads(self) -> dict[str, ConvLayer]:
        return {"cls": self.cls_head, "loc_mu": self.loc_mu_head,
                "loc_logvar": self.loc_logvar_head}

    def param_holders(self) -> dict[str, tuple[object, str]]:
        """(owner object, attribute) per parameter name, so verification code
        can temporarily swap a parameter tensor for a tape leaf."""
        holders: dict[str, tuple[object, str]] = {}
        for li, conv in enumerate(self.convs):
            holders[f"backbone.conv{li}.weight"] = (conv, "weight")
            if conv.bias is not None:
                holders[f"backbone.conv{li}.bias"] = (conv, "bias")
        for li, bn in enumerate(self.bns):
            if bn is not None:
                holders[f"backbone.bn{li}.gamma"] = (bn, "gamma")
                holders[f"backbone.bn{li}.beta"] = (bn, "beta")
        for li, proj in sorted(self.projections.items()):
            if proj is not None:
                holders[f"shortcut.proj{li}.weight"] = (proj, "weight")
        for name, head in self._heads().items():
            holders[f"head.{name}.weight"] = (head, "weight")
            holders[f"head.{name}.bias"] = (head, "bias")
        return holders

    def binarized_weight_names(self) -> list[str]:
        return [f"backbone.conv{li}.weight" for li, c in enumerate(self.convs)
                if c.binarized]

    # -- training forward --------------------------------------------------------

    def _check_finite(self, arr: np.ndarray, where: str) -> None:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite activations after {where}")

    def forward_train(self, images, rng: np.random.Generator | None = None,
                      frozen_sample: np.ndarray | None = None
                      ) -> tuple[HeadOutputs, Tensor]:
        """Tape-recorded forward pass; returns head outputs and the sampled
        binary feature map.

        With `frozen_sample` the feature map is injected as a constant (no
        gradient edge back to the probabilities), which makes the whole
        objective a deterministic, finite-difference-checkable function.
        """
        x = as_tensor(images)
        cfg = self.config
        if x.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ValueError(f"forward_train: expected (N,3,{cfg.image_size},"
                             f"{cfg.image_size}) images, got {x.shape}")
        last = cfg.n_layers - 1

        h = None
        act = x
        for li, conv in enumerate(self.convs):
            w = sign_ste(conv.weight) if conv.binarized else conv.weight
            out = conv2d(act, w, stride=conv.stride, pad=conv.pad,
                         pad_value=conv.pad_value)
            if conv.bias is not None:
                out = out + conv.bias.reshape((1, -1, 1, 1))
            bn = self.bns[li]
            if bn is not None:
                out = bn(out, training=True)
            if cfg.shortcut and li in self.projections and h is not None:
                proj = self.projections[li]
                shortcut = h if proj is None else conv2d(
                    h, proj.weight, stride=proj.stride, pad=0)
                out = out + shortcut
            self._check_finite(out.data, f"backbone layer {li}")
            h = out
            if li < last:
                act = sign_ste(h) if cfg.binarize else tanh(h)

        z = h  # pre-activation of the feature-probability layer
        p = sigmoid(z)
        dist = FeatureDistribution(p)
        if frozen_sample is not None:
            feature = Tensor(np.asarray(frozen_sample, dtype=p.dtype))
        else:
            if rng is None:
                raise ValueError("forward_train needs an rng unless a frozen "
                                 "sample is supplied")
            feature = bernoulli_st_sample(dist, rng)

        heads = self._run_heads_tape(feature)
        return HeadOutputs(class_logits=heads[0], loc_mean=heads[1],
                           loc_logvar=heads[2], feature_dist=dist), feature

    def _reshape_head_tape(self, t: Tensor, per_anchor: int) -> Tensor:
        n = t.shape[0]
        g = self.config.grid
        a = self.config.anchors_per_block
        t = t.reshape((n, a, per_anchor, g, g))
        t = t.transpose((0, 3, 4, 1, 2))
        return t.reshape((n, g * g * a, per_anchor))

    def _run_heads_tape(self, feature: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        k = self.config.num_classes + 1
        outs = []
        for head, per_anchor in ((self.cls_head, k),
                                 (self.loc_mu_head, LOC_DIM),
                                 (self.loc_logvar_head, LOC_DIM)):
            o = conv2d(feature, head.weight, stride=1, pad=head.pad)
            o = o + head.bias.reshape((1, -1, 1, 1))
            outs.append(self._reshape_head_tape(o, per_anchor))
        return tuple(outs)

    # -- inference forward -------------------------------------------------------

    def _conv_np(self, x: np.ndarray, conv: ConvLayer,
                 weight: np.ndarray | None = None) -> np.ndarray:
        w = conv.weight.data if weight is None else weight
        out, _ = conv2d_forward(x, w, conv.stride, conv.pad, conv.pad_value)
        if conv.bias is not None:
            out = out + conv.bias.data.reshape((1, -1, 1, 1))
        return out

    def eval_forward(self, images: np.ndarray,
                     use_bitpacked: bool = False) -> EvalOutputs:
        """Deterministic inference pass on plain arrays.

        Binarized layers run sign weights on sign activations; the bitpacked
        flag routes them through the xnor-popcount kernel instead of the float
        GEMM (bit-identical by construction).
        """
        cfg = self.config
        if use_bitpacked and not cfg.binarize:
            raise ValueError("bitpacked inference requires a binarized model")
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        last = cfg.n_layers - 1

        h = None
        act = x
        for li, conv in enumerate(self.convs):
            if conv.binarized:
                wb = np.where(conv.weight.data >= 0, 1.0, -1.0).astype(np.float32)
                if use_bitpacked:
                    out = binary.binary_conv2d_bitpacked(
                        binary.pack_channels_nchw(act),
                        binary.pack_filters_oihw(wb),
                        stride=conv.stride, pad=conv.pad).astype(np.float32)
                else:
                    out = self._conv_np(act, conv, weight=wb)
            else:
                out = self._conv_np(act, conv)
            bn = self.bns[li]
            if bn is not None:
                out = bn.apply_np(out)
            if cfg.shortcut and li in self.projections and h is not None:
                proj = self.projections[li]
                if proj is None:
                    out = out + h
                else:
                    out = out + self._conv_np(h, proj)
            h = out
            if li < last:
                act = (np.where(h >= 0, 1.0, -1.0).astype(np.float32)
                       if cfg.binarize else np.tanh(h))

        z = h
        p = 1.0 / (1.0 + np.exp(-z))
        f_sign = np.where(z >= 0, 1.0, -1.0).astype(np.float32)

        k = cfg.num_classes + 1
        heads = []
        for head, per_anchor in ((self.cls_head, k),
                                 (self.loc_mu_head, LOC_DIM),
                                 (self.loc_logvar_head, LOC_DIM)):
            o = self._conv_np(f_sign, head)
            heads.append(self._reshape_head_np(o, per_anchor))
        return EvalOutputs(class_logits=heads[0], loc_mean=heads[1],
                           loc_logvar=heads[2], feature_probs=p,
                           feature_sign=f_sign)

    def _reshape_head_np(self, o: np.ndarray, per_anchor: int) -> np.ndarray:
        n = o.shape[0]
        g = self.config.grid
        a = self.config.anchors_per_block
        return (o.reshape(n, a, per_anchor, g, g)
                .transpose(0, 3, 4, 1, 2)
                .reshape(n, g * g * a, per_anchor))

    def forward_infer(self, images: np.ndarray,
                      use_bitpacked: bool = False) -> list[list[Detection]]:
        """Decode pre-NMS detections for a batch of images.

        The covariance branch is ignored at inference; boxes come from the
        location mean only, the class is the softmax argmax, and anchors whose
        argmax is background emit nothing.
        """
        outs = self.eval_forward(images, use_bitpacked=use_bitpacked)
        a = self.config.anchors_per_block
        results: list[list[Detection]] = []
        for n in range(outs.class_logits.shape[0]):
            logits = outs.class_logits[n].astype(np.float64)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=-1, keepdims=True)
            cls = probs.argmax(axis=-1)
            dets: list[Detection] = []
            for idx in np.nonzero(cls > 0)[0]:
                mu = outs.loc_mean[n, idx]
                box = decode_offsets(self.anchors, mu[:2], mu[2:],
                                     block=idx // a, anchor=idx % a)
                dets.append(Detection(box=box, class_id=int(cls[idx]),
                                      score=float(probs[idx, cls[idx]])))
            results.append(dets)
        return results

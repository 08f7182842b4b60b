"""ibdet: binarized one-stage object detection trained with an
information-bottleneck objective plus a sparse-prior confidence term,
with bit-exact xnor-popcount inference kernels, at desk scale."""

__version__ = "0.1.0"

from .binary import (FeatureDistribution, PackedBits, bernoulli_st_sample,
                     binary_conv2d_bitpacked, bitpack, sign_ste, unpack,
                     xnor_popcount_dot)
from .config import RunConfig, build_run_config, config_hash
from .loss import (LossBreakdown, LossWeights, class_term, info_xf, loc_term,
                   sparse_prior_loss, total_objective)
from .metrics import (average_precision, complexity_report, info_plane, iou,
                      match_and_count, nms)
from .model import (AnchorGrid, BlockLabels, Detection, DetectorConfig,
                    DetectorModel, assign_blocks, build_anchors,
                    decode_offsets)
from .optim import AdamState, adam_step, lr_at_epoch
from .tensor import Tensor, backward, grad_check

__all__ = [
    "AdamState", "AnchorGrid", "BlockLabels", "Detection", "DetectorConfig",
    "DetectorModel", "FeatureDistribution", "LossBreakdown", "LossWeights",
    "PackedBits", "RunConfig", "Tensor", "adam_step", "assign_blocks",
    "average_precision", "backward", "bernoulli_st_sample",
    "binary_conv2d_bitpacked", "bitpack", "build_anchors", "build_run_config",
    "class_term", "complexity_report", "config_hash", "decode_offsets",
    "grad_check", "info_plane", "info_xf", "iou", "loc_term", "lr_at_epoch",
    "match_and_count", "nms", "sign_ste", "sparse_prior_loss",
    "total_objective", "unpack", "xnor_popcount_dot",
]

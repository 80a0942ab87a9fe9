"""Toy-scale numpy detector with multi-branch blocks, channel pruning and metrics."""

from .blocks import AKDC, MAKDF, SPPF, C3k2, C3k2_MAKDF, balanced_partition, band_length
from .evalkit import (COCO_THRESHOLDS, DetectionRecord, PRCurve, average_precision, evaluate,
                      iou, match, mean_ap, pr_curve)
from .fileio import (FormatError, load_checkpoint, load_schema, load_tensor, read_records,
                     save_checkpoint, save_tensor, write_records)
from .gradcheck import check_block, finite_diff_grad, gradcheck
from .head import (CRU, SRU, CRUConfig, DetectHead, ScConv, SCDetect, SRUConfig,
                   decode_detections, frozen_gates, nms)
from .model import (ConfigError, CostReport, DetectorModel, ModelConfig, build, count_flops,
                    count_params, summarize)
from .neck import RAU, RCFPN, SBA, ConcatFPN
from .nn import Conv2d, ConvBlock, Module
from .prune import (ChannelPruner, DependencyGroup, LampScores, PrunePlan, RateUnreachable,
                    apply_masks, build_dependency_groups, channel_importance, channel_prune,
                    lamp_scores, unstructured_prune)
from .tensor import NonFiniteError, Parameter, ShapeError, Tensor, backward, no_grad

__version__ = "0.1.0"

"""
Support-conditioned heads and the joint detection loss.

The same `joint_loss` scores both the class-agnostic proposal subnet (activityness
against anchor targets) and the support-conditioned head (common action against
proposal targets); training sums the two and takes one backward pass.
"""

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffcore import Linear
from .temporal import FloatArray, encode_offsets_array, tiou_matrix

IGNORE = -1

log = logging.getLogger("commonloc.heads")


class NonFiniteLossError(ArithmeticError):
    """The loss evaluated to NaN or infinity."""
    pass


@dataclass
class HeadOutputs:
    """Per-proposal logits/probabilities, offsets and padding mask."""
    logits: Tensor
    offsets: Tensor
    valid: Tensor

    @property
    def probs(self) -> Tensor:
        return torch.sigmoid(self.logits)


@dataclass
class LossTargets:
    """Labels in {1, 0, IGNORE}; offsets are only meaningful where the label is 1."""
    labels: npt.NDArray[np.int64]
    offsets: FloatArray

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    reg: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"total": self.total.item(), "cls": self.cls.item(), "reg": self.reg.item()}


class ClassificationHead(nn.Module):
    """
    Sigmoid common-action classifier and 2-d offset regressor over fused features.

    An optional (n, 2C) boundary context (see `proposals.segment_context`) feeds a
    zero-initialized layer whose outputs are added to the logit and the offsets.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.cls = Linear(channels, 1)
        self.reg = Linear(channels, 2)
        self.context = Linear(2 * channels, 3)
        nn.init.zeros_(self.context.weight)
        nn.init.zeros_(self.context.bias)

    def forward(self, fused: Tensor, valid: Tensor | None = None, context: Tensor | None = None) -> HeadOutputs:
        if valid is None:
            valid = torch.ones(fused.shape[0], dtype=torch.bool)
        logits = self.cls(fused).squeeze(-1)
        offsets = self.reg(fused)
        if context is not None:
            extra = self.context(context)
            logits = logits + extra[:, 0]
            offsets = offsets + extra[:, 1:]
        return HeadOutputs(logits, offsets, valid)


def classify_and_regress(
    fused: Tensor, head: ClassificationHead, valid: Tensor | None = None, context: Tensor | None = None
) -> HeadOutputs:
    out: HeadOutputs = head(fused, valid, context)
    return out


def joint_loss(
    outputs: HeadOutputs,
    targets: LossTargets,
    n_cls: float = 1.0,
    n_reg: float | None = None,
    mean_over_proposals: bool = False,
) -> LossTerms:
    """
    Binary cross-entropy over labeled entries plus smooth-L1 over positives.

    Classification is summed and divided by `n_cls` (the batch size), or averaged
    over labeled entries with `mean_over_proposals`. Regression is summed over the
    two offset components of positive entries and divided by `n_reg`, which
    defaults to the number of valid proposals. Ignored and padded entries
    contribute nothing.

    Raises:
        NonFiniteLossError: the loss is NaN or infinite
    """
    dtype = outputs.logits.dtype
    labels = torch.as_tensor(targets.labels)
    labeled = outputs.valid & (labels != IGNORE)
    positive = outputs.valid & (labels == 1)

    bce = F.binary_cross_entropy_with_logits(
        outputs.logits, (labels == 1).to(dtype), reduction="none"
    )
    cls_sum = torch.where(labeled, bce, torch.zeros_like(bce)).sum()
    if mean_over_proposals:
        cls = cls_sum / max(1, int(labeled.sum()))
    else:
        cls = cls_sum / n_cls

    target_offsets = torch.as_tensor(targets.offsets, dtype=dtype)
    per_entry = F.smooth_l1_loss(outputs.offsets, target_offsets, reduction="none").sum(dim=-1)
    reg_sum = torch.where(positive, per_entry, torch.zeros_like(per_entry)).sum()
    denom = n_reg if n_reg is not None else max(1, int(outputs.valid.sum()))
    reg = reg_sum / denom

    total = cls + reg
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"Loss is not finite: cls={cls.item()}, reg={reg.item()}")
    return LossTerms(total=total, cls=cls, reg=reg)


def label_by_overlap(
    segments: FloatArray,
    gt_segments: FloatArray,
    pos_thresh: float,
    neg_thresh: float,
    strict_negative: bool = False,
) -> LossTargets:
    """
    Label rows of `segments` by their best tIoU with any GT.

    >= pos_thresh -> 1, <= neg_thresh (or < with `strict_negative`) -> 0, otherwise
    IGNORE. Offsets of positives point at their best-overlapping GT.
    """
    n = len(segments)
    offsets = np.zeros((n, 2), dtype=np.float64)
    if len(gt_segments) == 0:
        return LossTargets(np.zeros(n, dtype=np.int64), offsets)

    overlaps = tiou_matrix(segments, gt_segments)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps[np.arange(n), best_gt]

    labels = np.full(n, IGNORE, dtype=np.int64)
    negative = best < neg_thresh if strict_negative else best <= neg_thresh
    labels[negative] = 0
    labels[best >= pos_thresh] = 1

    pos = labels == 1
    if pos.any():
        offsets[pos] = encode_offsets_array(segments[pos], gt_segments[best_gt[pos]])
    return LossTargets(labels, offsets)


def build_conditioned_targets(
    proposals: FloatArray,
    gt_segments: FloatArray,
    iou_thresh: float = 0.5,
    neg_thresh: float = 0.3,
) -> LossTargets:
    """Targets for the support-conditioned head: does a proposal hold the common action?"""
    return label_by_overlap(proposals, gt_segments, iou_thresh, neg_thresh, strict_negative=True)

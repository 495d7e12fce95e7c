"""
Class-agnostic proposal subnet.

Anchors of several lengths are centered on every feature step; a small head scores
each anchor's mean-pooled feature and boundary contrast for activityness and
regresses boundary offsets.
`select_proposals` then applies the score filter, NMS and the fixed per-phase
proposal count.
"""

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import torch
from torch import Tensor, nn

from .config import AnchorConfig, ProposalConfig
from .diffcore import Linear
from .heads import LossTargets, label_by_overlap
from .models import ContractViolation, Phase, TemporalSegment
from .temporal import FloatArray, array_to_segments, encode_offsets_array, nms_indices, tiou_matrix

log = logging.getLogger("commonloc.proposals")


class ProposalError(RuntimeError):
    """No proposal could be generated for a video."""
    pass


def anchor_array(num_steps: int, scales: tuple[int, ...] | list[int], stride: int, extent: float | None = None) -> FloatArray:
    """
    (num_steps * len(scales), 2) anchors, position-major then scale.

    Anchor centers sit at step * stride; anchors are clipped to [0, extent], where
    extent defaults to num_steps * stride.
    """
    if num_steps < 1:
        raise ContractViolation(f"num_steps must be >= 1, got {num_steps}")
    upper = float(num_steps * stride if extent is None else extent)
    centers = np.arange(num_steps, dtype=np.float64) * stride
    half = 0.5 * np.asarray(scales, dtype=np.float64)
    starts = (centers[:, None] - half[None, :]).reshape(-1)
    ends = (centers[:, None] + half[None, :]).reshape(-1)
    anchors: FloatArray = np.stack([starts, ends], axis=1).clip(0.0, upper)
    return anchors


def generate_anchors(num_steps: int, config: AnchorConfig) -> list[TemporalSegment]:
    return array_to_segments(anchor_array(num_steps, config.scales, config.stride))


def pool_segments(features: Tensor, segments: FloatArray, stride: int) -> Tensor:
    """
    Mean of feature steps covered by each segment -> (n, C).

    A segment [s, e] covers steps floor(s / stride) up to ceil(e / stride), at least
    one step, clipped to the feature map.
    """
    lo, hi = _step_range(segments, stride, int(features.shape[0]))
    return _range_mean(_cumsum(features), lo, hi)


def segment_context(features: Tensor, segments: FloatArray, stride: int, ratio: float = 0.5) -> Tensor:
    """
    Boundary contrast of each segment -> (n, 2C).

    The first C columns are the inside mean minus the mean of the `ratio * length`
    steps just before the segment, the last C the same against the steps just after
    it. Context regions are clipped to the feature map; a region with no step left
    falls back to the segment's own edge step, which gives zero contrast on that side.
    """
    num_steps = int(features.shape[0])
    lo, hi = _step_range(segments, stride, num_steps)
    width = np.maximum(1, np.round(ratio * (hi - lo))).astype(np.int64)

    left_lo, left_hi = np.maximum(lo - width, 0), lo.copy()
    empty = left_hi <= left_lo
    left_lo[empty], left_hi[empty] = lo[empty], lo[empty] + 1

    right_lo, right_hi = hi.copy(), np.minimum(hi + width, num_steps)
    empty = right_hi <= right_lo
    right_lo[empty], right_hi[empty] = hi[empty] - 1, hi[empty]

    csum = _cumsum(features)
    inside = _range_mean(csum, lo, hi)
    left = _range_mean(csum, left_lo, left_hi)
    right = _range_mean(csum, right_lo, right_hi)
    return torch.cat([inside - left, inside - right], dim=1)


def _step_range(
    segments: FloatArray, stride: int, num_steps: int
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    lo = np.floor(segments[:, 0] / stride).astype(np.int64).clip(0, num_steps - 1)
    hi = np.ceil(segments[:, 1] / stride).astype(np.int64).clip(1, num_steps)
    return lo, np.maximum(hi, lo + 1)


def _cumsum(features: Tensor) -> Tensor:
    return torch.cat([features.new_zeros(1, features.shape[1]), features.cumsum(dim=0)], dim=0)


def _range_mean(csum: Tensor, lo: npt.NDArray[np.int64], hi: npt.NDArray[np.int64]) -> Tensor:
    lo_t, hi_t = torch.from_numpy(lo), torch.from_numpy(hi)
    counts = (hi_t - lo_t).to(csum.dtype).unsqueeze(1)
    return (csum[hi_t] - csum[lo_t]) / counts


class ProposalHead(nn.Module):
    """
    Activityness score and boundary offsets per anchor.

    The hidden layer reads the anchor's inside mean next to its boundary contrast
    (`segment_context`).
    """

    def __init__(self, channels: int, context_ratio: float = 0.5):
        super().__init__()
        self.context_ratio = context_ratio
        self.hidden = Linear(3 * channels, channels)
        self.cls = Linear(channels, 1)
        self.reg = Linear(channels, 2)

    def forward(self, features: Tensor, anchors: FloatArray, stride: int) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (logits (n,), offsets (n, 2), pooled anchor features (n, C))."""
        pooled = pool_segments(features, anchors, stride)
        context = segment_context(features, anchors, stride, self.context_ratio)
        h = torch.relu(self.hidden(torch.cat([pooled, context], dim=1)))
        return self.cls(h).squeeze(-1), self.reg(h), pooled


def proposal_forward(
    head: ProposalHead, features: Tensor, anchors: FloatArray, stride: int
) -> tuple[Tensor, Tensor, Tensor]:
    """(scores via sigmoid, offsets, pooled features) for every anchor."""
    logits, offsets, pooled = head(features, anchors, stride)
    return torch.sigmoid(logits), offsets, pooled


def assign_targets(
    anchors: FloatArray,
    gt_segments: FloatArray,
    pos_thresh: float = 0.7,
    neg_thresh: float = 0.3,
) -> LossTargets:
    """
    Class-agnostic anchor labels.

    Positive when the best tIoU with a GT is >= pos_thresh, or when the anchor is the
    best match of some GT; negative when the best tIoU is <= neg_thresh; otherwise
    ignored. Without GTs every anchor is negative.
    """
    if len(anchors) == 0:
        raise ContractViolation("assign_targets needs at least one anchor")
    targets = label_by_overlap(anchors, gt_segments, pos_thresh, neg_thresh)
    if len(gt_segments) == 0:
        return targets

    overlaps = tiou_matrix(anchors, gt_segments)
    for g in range(len(gt_segments)):
        column = overlaps[:, g]
        if column.max() <= 0:
            log.warning(f"GT {gt_segments[g].tolist()} overlaps no anchor")
            continue
        winners = np.flatnonzero(column == column.max())
        promoted = winners[targets.labels[winners] != 1]
        targets.labels[promoted] = 1
        best = overlaps[promoted].argmax(axis=1)
        targets.offsets[promoted] = encode_offsets_array(anchors[promoted], gt_segments[best])
    return targets


@dataclass
class ProposalBatch:
    """Fixed-size proposal set; padded rows duplicate the top proposal and are masked."""
    segments: FloatArray
    scores: npt.NDArray[np.float64]
    valid: npt.NDArray[np.bool_]
    features: Tensor | None = None
    context: Tensor | None = None

    @property
    def size(self) -> int:
        return len(self.segments)

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def valid_mask(self) -> Tensor:
        return torch.from_numpy(self.valid.copy())


def proposal_count(phase: Phase, config: ProposalConfig) -> int:
    return config.train_count if phase is Phase.TRAIN else config.eval_count


def select_proposals(
    segments: FloatArray,
    scores: npt.ArrayLike,
    phase: Phase,
    config: ProposalConfig,
) -> ProposalBatch:
    """
    Score filter, NMS and fixed-size truncation/padding.

    Keeps proposals scoring >= score_threshold, falling back to the top `min_keep`
    when fewer survive; suppresses at nms_threshold; keeps the best
    `proposal_count(phase)` and pads by repeating the top proposal.

    Raises:
        ProposalError: no proposals at all
    """
    score_arr = np.asarray(scores, dtype=np.float64)
    if len(segments) == 0:
        raise ProposalError("No proposals generated; video shorter than the smallest anchor")

    order = np.lexsort((np.arange(len(score_arr)), segments[:, 0], -score_arr))
    passing = order[score_arr[order] >= config.score_threshold]
    if len(passing) < config.min_keep:
        log.debug(f"{len(passing)} proposals pass {config.score_threshold}; keeping top {config.min_keep}")
        passing = order[: config.min_keep]

    kept = passing[nms_indices(segments[passing], score_arr[passing], config.nms_threshold)]
    count = proposal_count(phase, config)
    kept = kept[:count]

    valid = np.zeros(count, dtype=np.bool_)
    valid[: len(kept)] = True
    index = np.concatenate([kept, np.full(count - len(kept), kept[0], dtype=np.int64)])
    return ProposalBatch(segments=segments[index].copy(), scores=score_arr[index].copy(), valid=valid)

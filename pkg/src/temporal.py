"""
Temporal interval geometry.

Overlap (tIoU), greedy non-maximum suppression, center/log-length offset coding and
multi-scale sliding-window generation. Scalar functions take `TemporalSegment`
values; the `*_array` variants work on (n, 2) float arrays of [start, end] rows and
are what the proposal and inference stages use.
"""

import logging
import math
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt

from .models import ContractViolation, OffsetPair, ScoredSegment, TemporalSegment

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

# Minimum decoded length when the predicted length collapses
MIN_SEGMENT_LENGTH = 1.0
# Largest |log length ratio| `decode_offsets` applies
MAX_LOG_RATIO = 20.0

log = logging.getLogger("commonloc.temporal")


def segments_to_array(segments: Sequence[TemporalSegment]) -> FloatArray:
    """Stack segments into an (n, 2) array."""
    if not segments:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array([[s.start, s.end] for s in segments], dtype=np.float64)


def array_to_segments(rows: FloatArray) -> list[TemporalSegment]:
    return [TemporalSegment(float(s), float(e)) for s, e in rows]


def _check_rows(rows: FloatArray, name: str) -> None:
    if rows.ndim != 2 or rows.shape[1] != 2:
        raise ContractViolation(f"{name} must have shape (n, 2), got {rows.shape}")
    if rows.size and not np.all(rows[:, 0] < rows[:, 1]):
        raise ContractViolation(f"{name} contains segments with start >= end")


def tiou(a: TemporalSegment, b: TemporalSegment) -> float:
    """Temporal intersection over union of two segments."""
    for seg in (a, b):
        if not seg.start < seg.end:
            raise ContractViolation(f"Invalid segment [{seg.start}, {seg.end}]")
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def tiou_matrix(a: FloatArray, b: FloatArray) -> FloatArray:
    """Pairwise tIoU between rows of `a` (n, 2) and rows of `b` (m, 2) -> (n, m)."""
    _check_rows(a, "a")
    _check_rows(b, "b")
    tt1 = np.maximum(a[:, None, 0], b[None, :, 0])
    tt2 = np.minimum(a[:, None, 1], b[None, :, 1])
    inter = (tt2 - tt1).clip(0)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    result: FloatArray = inter / union
    return result


def nms_indices(segments: FloatArray, scores: npt.ArrayLike, threshold: float) -> IntArray:
    """
    Greedy NMS over rows of `segments`; returns kept row indices in output order.

    Candidates are visited by descending score, ties broken by earlier start and then
    by smaller row index. A candidate is dropped when its tIoU with an already kept
    segment exceeds `threshold`.
    """
    n = len(segments)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    _check_rows(segments, "segments")
    score_arr = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(n), segments[:, 0], -score_arr))

    keep: list[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = tiou_matrix(segments[i : i + 1], segments[rest])[0]
        order = rest[ious <= threshold]
    return np.array(keep, dtype=np.int64)


def nms(candidates: Sequence[ScoredSegment], threshold: float) -> list[ScoredSegment]:
    """Greedy non-maximum suppression; output sorted by descending score."""
    if not candidates:
        return []
    segments = segments_to_array([c.segment for c in candidates])
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    return [candidates[i] for i in nms_indices(segments, scores, threshold)]


def encode_offsets(proposal: TemporalSegment, target: TemporalSegment) -> OffsetPair:
    """Offsets that move `proposal` onto `target`."""
    if not proposal.length > 0:
        raise ContractViolation(f"Zero-length proposal [{proposal.start}, {proposal.end}]")
    return OffsetPair(
        delta_center=(target.center - proposal.center) / proposal.length,
        delta_length=math.log(target.length / proposal.length),
    )


def decode_offsets(
    proposal: TemporalSegment, offsets: OffsetPair, max_log_ratio: float = MAX_LOG_RATIO
) -> TemporalSegment:
    """
    Apply offsets to a proposal (exact inverse of `encode_offsets`).

    The length term is clamped to [-max_log_ratio, max_log_ratio]. A collapsed length
    is replaced by MIN_SEGMENT_LENGTH and a start that falls before frame 0 is
    clipped; all three cases are logged.
    """
    delta_length = offsets.delta_length
    if abs(delta_length) > max_log_ratio:
        log.warning(f"Length offset {delta_length:.3f} clamped to +/-{max_log_ratio}")
        delta_length = math.copysign(max_log_ratio, delta_length)
    center = proposal.center + offsets.delta_center * proposal.length
    length = proposal.length * math.exp(delta_length)
    if not length > 0 or not math.isfinite(length):
        log.warning(f"Decoded length {length} collapsed; clamping to {MIN_SEGMENT_LENGTH}")
        length = MIN_SEGMENT_LENGTH
    start, end = center - 0.5 * length, center + 0.5 * length
    if start < 0:
        log.warning(f"Decoded segment starts at {start:.3f}; clipping to 0")
        start = 0.0
        end = max(end, MIN_SEGMENT_LENGTH)
    return TemporalSegment(start, end)


def encode_offsets_array(proposals: FloatArray, targets: FloatArray) -> FloatArray:
    """Row-wise `encode_offsets` -> (n, 2) array of (delta_center, delta_length)."""
    p_len = proposals[:, 1] - proposals[:, 0]
    if np.any(p_len <= 0):
        raise ContractViolation("Zero-length proposal in offset encoding")
    t_len = targets[:, 1] - targets[:, 0]
    p_ctr = 0.5 * (proposals[:, 0] + proposals[:, 1])
    t_ctr = 0.5 * (targets[:, 0] + targets[:, 1])
    return np.stack([(t_ctr - p_ctr) / p_len, np.log(t_len / p_len)], axis=1)


def decode_offsets_array(
    proposals: FloatArray,
    offsets: FloatArray,
    extent: float | None = None,
    max_log_ratio: float | None = None,
) -> tuple[FloatArray, npt.NDArray[np.bool_]]:
    """
    Row-wise `decode_offsets`.

    Returns the decoded (n, 2) array and a mask of rows whose length had to be
    clamped. With `extent`, rows are clipped to [0, extent]. `max_log_ratio` bounds
    the length term so that untrained regressors cannot overflow.
    """
    p_len = proposals[:, 1] - proposals[:, 0]
    p_ctr = 0.5 * (proposals[:, 0] + proposals[:, 1])
    d_len = offsets[:, 1]
    if max_log_ratio is not None:
        d_len = np.clip(d_len, -max_log_ratio, max_log_ratio)
    center = p_ctr + offsets[:, 0] * p_len
    length = p_len * np.exp(d_len)

    decoded = np.stack([center - 0.5 * length, center + 0.5 * length], axis=1)
    upper = np.inf if extent is None else float(extent)
    decoded = decoded.clip(0.0, upper)

    collapsed = ~(decoded[:, 1] - decoded[:, 0] >= MIN_SEGMENT_LENGTH)
    if np.any(collapsed):
        half = 0.5 * MIN_SEGMENT_LENGTH
        centers = np.nan_to_num(decoded[collapsed].mean(axis=1)).clip(half, upper - half)
        decoded[collapsed, 0] = centers - half
        decoded[collapsed, 1] = centers + half
        log.debug(f"Clamped {int(collapsed.sum())} collapsed segments to {MIN_SEGMENT_LENGTH} frame")
    return decoded, collapsed


def sliding_windows(
    num_frames: int,
    window_lengths: Sequence[int],
    overlap: float,
) -> list[TemporalSegment]:
    """
    Multi-scale sliding windows over a video.

    For every window length that fits the video, windows start at multiples of
    `length * (1 - overlap)`; a final window ending exactly at `num_frames` is added
    when the regular grid leaves a tail uncovered. When no length fits, the whole
    video is the only window.
    """
    if num_frames < 1:
        raise ContractViolation(f"num_frames must be >= 1, got {num_frames}")
    if not 0.0 <= overlap < 1.0:
        raise ContractViolation(f"overlap must lie in [0, 1), got {overlap}")

    windows: list[TemporalSegment] = []
    seen: set[tuple[float, float]] = set()

    def add(start: float, end: float) -> None:
        key = (float(start), float(end))
        if key not in seen:
            seen.add(key)
            windows.append(TemporalSegment(*key))

    for length in sorted(window_lengths):
        if length > num_frames:
            continue
        stride = length * (1.0 - overlap)
        k = 0
        last_end = 0.0
        while k * stride + length <= num_frames:
            add(k * stride, k * stride + length)
            last_end = k * stride + length
            k += 1
        if last_end < num_frames:
            add(num_frames - length, num_frames)

    if not windows:
        add(0.0, float(num_frames))
    return windows

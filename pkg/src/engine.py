"""
Training and inference orchestration.

`CommonLocNet` bundles the backbone provider, the proposal subnet, the alignment
modules and the classification head under stable parameter names
(`backbone.*`, `proposal.*`, `mem.sq.*`, `mem.qs.*`, `pam.k{i}.*`, `pam.res.*`,
`head.cls.*`, `head.reg.*`, `head.context.*`). `forward_episode` runs the full
pipeline for one episode; `train`, `infer` and `infer_long` build on it.
"""

import dataclasses
import hashlib
import json
import logging
import math
import random
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn
from torch.optim.lr_scheduler import LambdaLR

from .alignment import AlignmentOutput, MutualEnhancement, ProgressiveAlignment, align
from .circuit_breaker import CircuitBreaker, IterationMetrics, TrainingDiverged, create_circuit_breaker
from .config import RunConfig, TrainConfig, config_from_dict, config_to_dict, resolved_dims
from .diffcore import ContainerError, load_tensors, save_tensors
from .episodes import EpisodeData, EpisodeSource
from .evaluation import EpisodeResult
from .features import build_provider, encode_query, encode_support, inflate_image_support
from .heads import ClassificationHead, HeadOutputs, NonFiniteLossError, build_conditioned_targets, joint_loss
from .models import AnnotatedVideo, ContractViolation, Phase, PredictionSet, ScoredSegment, TemporalSegment
from .proposals import (
    ProposalBatch,
    ProposalHead,
    anchor_array,
    assign_targets,
    pool_segments,
    segment_context,
    select_proposals,
)
from .temporal import FloatArray, decode_offsets_array, nms_indices, sliding_windows

CHECKPOINT_FILE = "checkpoint.tensors"
TRAIN_LOG_FILE = "train_log.jsonl"
CHECKPOINT_SCHEMA_VERSION = 1

log = logging.getLogger("commonloc.engine")


class CommonLocNet(nn.Module):
    """All trainable parts of the localizer."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        d, d_v = resolved_dims(m)
        self.backbone = build_provider(m.backbone, m.channels, m.input_channels)
        self.proposal = ProposalHead(m.channels)
        self.mem = MutualEnhancement(m.channels, d, d_v, m.scale_attention) if m.use_mem else None
        self.pam = (
            ProgressiveAlignment(m.channels, d, d_v, m.depth, m.reduction, m.scale_attention)
            if m.use_pam
            else None
        )
        self.head = ClassificationHead(m.channels)
        self.use_pmm = m.use_pmm

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


@dataclass
class EpisodeForward:
    """Everything one pass over an episode produces."""
    anchors: FloatArray
    anchor_logits: Tensor
    anchor_offsets: Tensor
    batch: ProposalBatch
    alignment: AlignmentOutput
    head: HeadOutputs
    refined: FloatArray


def _numpy(t: Tensor) -> FloatArray:
    out: FloatArray = t.detach().to(torch.float64).cpu().numpy()
    return out


def encode_supports(net: CommonLocNet, cfg: RunConfig, data: EpisodeData) -> Tensor:
    """(S x T x C) support representation."""
    dtype = net.dtype
    parts = []
    for rows in data.supports:
        x = torch.from_numpy(np.ascontiguousarray(rows)).to(dtype)
        if data.episode.image_support:
            parts.append(inflate_image_support(net.backbone, x[0], cfg.model.parts))
        else:
            parts.append(encode_support(net.backbone, x, cfg.model.parts))
    return torch.stack(parts, dim=0)


def forward_episode(net: CommonLocNet, cfg: RunConfig, data: EpisodeData, phase: Phase) -> EpisodeForward:
    """
    Proposals -> selection -> alignment -> heads for one episode.

    Proposal selection uses the `phase` policy (fixed proposal count per phase).
    Segment decoding and selection run on detached values; gradients reach the
    backbone through the pooled proposal features.
    """
    stride = cfg.anchors.stride
    downsample = getattr(net.backbone, "downsample", 1)
    if data.row_stride * downsample != stride:
        raise ContractViolation(
            f"Input rows cover {data.row_stride} frames and the backbone downsamples by {downsample}, "
            f"but anchors assume {stride} frames per step"
        )
    extent = float(data.extent)
    max_log = cfg.model.max_log_ratio

    query = torch.from_numpy(np.ascontiguousarray(data.query)).to(net.dtype)
    features = encode_query(net.backbone, query)
    anchors = anchor_array(int(features.shape[0]), cfg.anchors.scales, stride, extent)
    logits, offsets, _ = net.proposal(features, anchors, stride)

    decoded, _ = decode_offsets_array(anchors, _numpy(offsets), extent, max_log)
    batch = select_proposals(decoded, _numpy(torch.sigmoid(logits)), phase, cfg.proposals)
    batch.features = pool_segments(features, batch.segments, stride)
    batch.context = segment_context(features, batch.segments, stride, net.proposal.context_ratio)

    aligned = align(batch.features, encode_supports(net, cfg, data), net.mem, net.pam, net.use_pmm)
    head: HeadOutputs = net.head(aligned.fused, batch.valid_mask(), batch.context)
    refined, _ = decode_offsets_array(batch.segments, _numpy(head.offsets), extent, max_log)
    return EpisodeForward(anchors, logits, offsets, batch, aligned, head, refined)


def scheduled_lr(cfg: TrainConfig, iteration: int) -> float:
    """Step schedule: `lr` before `decay_iteration`, `lr_after_decay` from then on."""
    return cfg.lr if iteration < cfg.decay_iteration else cfg.lr_after_decay


def set_seeds(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_net(cfg: RunConfig, dtype: torch.dtype = torch.float32) -> CommonLocNet:
    set_seeds(cfg.train.seed)
    net = CommonLocNet(cfg).to(dtype)
    return net


@dataclass
class TrainResult:
    net: CommonLocNet
    checkpoint: Path
    log_file: Path
    losses: list[float]


def episode_losses(net: CommonLocNet, cfg: RunConfig, data: EpisodeData) -> dict[str, Any]:
    """Support-agnostic (anchors) and support-conditioned (proposals) loss terms."""
    t, p = cfg.train, cfg.proposals
    fwd = forward_episode(net, cfg, data, Phase.TRAIN)
    gt = data.row_gt_array

    anchor_targets = assign_targets(fwd.anchors, gt, p.pos_iou, p.neg_iou)
    anchor_outputs = HeadOutputs(
        fwd.anchor_logits, fwd.anchor_offsets, torch.ones(len(fwd.anchors), dtype=torch.bool)
    )
    agnostic = joint_loss(
        anchor_outputs, anchor_targets, n_cls=t.batch_size, mean_over_proposals=t.cls_mean_over_proposals
    )

    cond_targets = build_conditioned_targets(fwd.batch.segments, gt, p.cond_pos_iou, p.cond_neg_iou)
    conditioned = joint_loss(
        fwd.head, cond_targets, n_cls=t.batch_size, mean_over_proposals=t.cls_mean_over_proposals
    )
    return {"agnostic": agnostic, "conditioned": conditioned, "total": agnostic.total + conditioned.total}


def train(
    cfg: RunConfig,
    source: EpisodeSource,
    out_dir: str | Path,
    breaker: CircuitBreaker | None = None,
    on_iteration: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """
    Episodic training with Adam and a step learning-rate decay.

    Each iteration draws training episode `iteration` from `source`, sums the
    support-agnostic and support-conditioned losses, and takes one optimizer step.
    Every iteration appends a JSON record to the training log; the checkpoint is
    written at the end.

    Raises:
        TrainingDiverged: a non-finite loss or gradient (carries a snapshot)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    net = build_net(cfg)
    optimizer = torch.optim.Adam(net.parameters(), lr=t.lr)
    scheduler = LambdaLR(optimizer, lambda it: scheduled_lr(t, it) / t.lr)
    breaker = breaker or create_circuit_breaker(
        no_progress_threshold=t.plateau_windows, spike_ratio=t.spike_ratio, window=max(1, t.log_every)
    )

    log_file = out_dir / TRAIN_LOG_FILE
    losses: list[float] = []
    log.info(f"Training {t.iterations} iterations, lr {t.lr} -> {t.lr_after_decay} at {t.decay_iteration}")
    with log_file.open("w") as f:
        for iteration in range(t.iterations):
            lr = optimizer.param_groups[0]["lr"]
            net.train()
            try:
                terms = episode_losses(net, cfg, source.get(iteration))
            except NonFiniteLossError as e:
                breaker.record_iteration(IterationMetrics(iteration, math.nan, math.nan, lr))
                raise TrainingDiverged(str(e), breaker.snapshot()) from e

            optimizer.zero_grad()
            terms["total"].backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(net.parameters(), max_norm=math.inf))
            total = terms["total"].item()
            breaker.record_iteration(IterationMetrics(iteration, total, grad_norm, lr))
            optimizer.step()
            scheduler.step()

            agnostic, conditioned = terms["agnostic"].as_floats(), terms["conditioned"].as_floats()
            record = {
                "iteration": iteration,
                "total_loss": total,
                "cls_loss": agnostic["cls"] + conditioned["cls"],
                "reg_loss": agnostic["reg"] + conditioned["reg"],
                "lr": lr,
                "agnostic": agnostic,
                "conditioned": conditioned,
            }
            f.write(json.dumps(record) + "\n")
            losses.append(total)
            if on_iteration:
                on_iteration(record)
            if t.log_every and (iteration % t.log_every == 0 or iteration == t.iterations - 1):
                log.info(
                    f"iter {iteration}: loss {total:.4f} (cls {record['cls_loss']:.4f}, "
                    f"reg {record['reg_loss']:.4f}) lr {lr:.2e} |g| {grad_norm:.3f}"
                )

    checkpoint = save_checkpoint(out_dir / CHECKPOINT_FILE, net, cfg, t.iterations)
    log.info(f"Checkpoint written to {checkpoint}")
    return TrainResult(net=net, checkpoint=checkpoint, log_file=log_file, losses=losses)


def save_checkpoint(path: str | Path, net: CommonLocNet, cfg: RunConfig, iteration: int) -> Path:
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "iteration": iteration,
        "config": config_to_dict(cfg),
    }
    return save_tensors(path, dict(net.state_dict()), meta)


@dataclass
class Checkpoint:
    net: CommonLocNet
    cfg: RunConfig
    iteration: int
    checkpoint_id: str


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> Checkpoint:
    """
    Rebuild the network from a checkpoint.

    The stored config echo defines the architecture; `cfg`, when given, supplies the
    evaluation-time settings and must agree on the model and anchors.
    """
    tensors, meta = load_tensors(path)
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ContainerError(f"{path}: unsupported checkpoint schema {meta.get('schema_version')}")
    stored = config_from_dict(meta["config"])
    if cfg is not None:
        if dataclasses.asdict(cfg.model) != dataclasses.asdict(stored.model) or cfg.anchors != stored.anchors:
            log.warning("Model/anchor settings differ from the checkpoint; using the checkpoint's")
        run_cfg = dataclasses.replace(cfg, model=stored.model, anchors=stored.anchors)
    else:
        run_cfg = stored
    net = CommonLocNet(run_cfg)
    missing, unexpected = net.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise ContainerError(f"{path}: parameter mismatch (missing {missing}, unexpected {unexpected})")
    net.eval()
    return Checkpoint(net, run_cfg, int(meta.get("iteration", 0)), checkpoint_id(path))


def canonical_supports(data: EpisodeData) -> EpisodeData:
    """Order supports by content so that results do not depend on input order."""
    order = sorted(
        range(len(data.supports)),
        key=lambda i: hashlib.sha256(np.ascontiguousarray(data.supports[i], dtype=np.float32).tobytes()).hexdigest(),
    )
    episode = dataclasses.replace(data.episode, supports=tuple(data.episode.supports[i] for i in order))
    return EpisodeData(
        episode, data.query, [data.supports[i] for i in order], data.row_stride, data.frame_offset
    )


def _prediction_set(video_id: str, segments: FloatArray, scores: FloatArray, threshold: float) -> PredictionSet:
    if len(segments) == 0:
        return PredictionSet(video_id=video_id)
    keep = nms_indices(segments, scores, threshold)
    return PredictionSet(
        video_id=video_id,
        predictions=[
            ScoredSegment(TemporalSegment(float(segments[i, 0]), float(segments[i, 1])), float(scores[i]))
            for i in keep
        ],
    )


def infer(net: CommonLocNet, cfg: RunConfig, data: EpisodeData) -> PredictionSet:
    """
    Localize the common action in a query of at most `eval.max_window` frames.

    Refined proposals are scored by the classification head, times the proposal's
    activityness when `eval.fuse_proposal_score` is set. Segments are mapped to query
    frames and reduced by a final NMS at `cfg.final_nms_threshold()`.
    """
    if data.num_frames > cfg.eval.max_window:
        raise ContractViolation(
            f"Query has {data.num_frames} frames (> {cfg.eval.max_window}); use infer_long"
        )
    net.eval()
    with torch.no_grad():
        fwd = forward_episode(net, cfg, canonical_supports(data), Phase.TEST)
    valid = fwd.batch.valid
    scores = _numpy(fwd.head.probs)[valid]
    if cfg.eval.fuse_proposal_score:
        scores = scores * fwd.batch.scores[valid]
    segments = (fwd.refined[valid] - data.frame_offset).clip(0.0, float(data.num_frames))
    kept = segments[:, 1] > segments[:, 0]
    return _prediction_set(
        data.episode.query.video_id, segments[kept], scores[kept].clip(0.0, 1.0), cfg.final_nms_threshold()
    )


def window_episodes(cfg: RunConfig, data: EpisodeData) -> list[tuple[TemporalSegment, EpisodeData]]:
    """
    Cut a long query into one sub-episode per sliding window.

    A sub-episode's frame 0 is its window's start; its rows start on the row grid
    at or before it, with the remainder carried as `frame_offset`.
    """
    rs = data.row_stride
    query = data.episode.query
    out: list[tuple[TemporalSegment, EpisodeData]] = []
    for window in sliding_windows(data.num_frames, cfg.eval.window_lengths, cfg.eval.window_overlap):
        first = window.start + data.frame_offset
        lo = min(int(math.floor(first / rs)), len(data.query) - 1)
        hi = min(max(int(math.ceil((window.end + data.frame_offset) / rs)), lo + 1), len(data.query))
        sub_video = AnnotatedVideo(f"{query.video_id}@{window.start:g}", int(window.length), query.fps)
        sub_episode = dataclasses.replace(data.episode, query=sub_video, gt_segments=())
        out.append((window, EpisodeData(sub_episode, data.query[lo:hi], data.supports, rs, first - lo * rs)))
    return out


def merge_window_predictions(
    video_id: str,
    windowed: list[tuple[TemporalSegment, PredictionSet]],
    num_frames: int,
    cfg: RunConfig,
    edge_tolerance: float = 0.0,
) -> PredictionSet:
    """
    Shift window predictions to query frames and reduce them with one final NMS.

    A prediction reaching a window edge that lies inside the query is likely a cut
    action; its score is scaled by `eval.window_edge_weight`.
    """
    segments: list[list[float]] = []
    scores: list[float] = []
    for window, predictions in windowed:
        cut_start = window.start > 0
        cut_end = window.end < num_frames
        for p in predictions.predictions:
            weight = 1.0
            if (cut_start and p.segment.start <= edge_tolerance) or (
                cut_end and p.segment.end >= window.length - edge_tolerance
            ):
                weight = cfg.eval.window_edge_weight
            segments.append([p.segment.start + window.start, min(p.segment.end + window.start, float(num_frames))])
            scores.append(p.score * weight)
    return _prediction_set(
        video_id,
        np.asarray(segments, dtype=np.float64).reshape(-1, 2),
        np.asarray(scores, dtype=np.float64),
        cfg.final_nms_threshold(),
    )


def infer_long(net: CommonLocNet, cfg: RunConfig, data: EpisodeData) -> PredictionSet:
    """
    Multi-scale sliding-window inference for long queries.

    Each window is localized with `infer` and the results are combined by
    `merge_window_predictions`. Queries that fit one window go straight to `infer`.
    """
    if data.num_frames <= cfg.eval.max_window:
        return infer(net, cfg, data)

    windowed = [(window, infer(net, cfg, sub)) for window, sub in window_episodes(cfg, data)]
    video_id = data.episode.query.video_id
    log.debug(f"{video_id}: {sum(len(p.predictions) for _, p in windowed)} predictions from {len(windowed)} windows")
    return merge_window_predictions(video_id, windowed, data.num_frames, cfg, edge_tolerance=cfg.anchors.stride)


def run_episodes(
    net: CommonLocNet,
    cfg: RunConfig,
    source: EpisodeSource,
    count: int,
) -> list[EpisodeResult]:
    """Infer `count` episodes from `source` (long queries take the window path)."""
    results = []
    for index in range(count):
        data = source.get(index)
        predictions = infer_long(net, cfg, data)
        results.append(
            EpisodeResult(
                episode_id=data.episode.episode_id,
                predictions=predictions,
                gt_segments=list(data.episode.gt_segments),
                num_supports=data.episode.num_supports,
            )
        )
    return results

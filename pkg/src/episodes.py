"""
Few-shot episode sampling.

An episode pairs N trimmed support clips of one (hidden) class with an untrimmed
query video containing that class. Training draws a fresh pairing per seed;
validation and test pairings are a pure function of the episode index, so the same
index always yields the same episode.

Two sources feed the engine: `SyntheticEpisodeSource` generates embedding-plus-noise
features at desk scale, and `FeatureEpisodeSource` reads precomputed feature
containers for a reorganized split.
"""

import logging
import math
import random
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import numpy.typing as npt

from .config import RunConfig, SyntheticConfig
from .features import FEATURE_SUFFIX, FrameFeatures, load_precomputed
from .models import AnnotatedVideo, Episode, Instance, Phase, SupportClip, TemporalSegment
from .splits import SplitData, read_manifest
from .temporal import FloatArray, segments_to_array

log = logging.getLogger("commonloc.episodes")

SYNTHETIC_FPS = 30.0
COMMON_LABEL = "common"
# Stream tags keep training and held-out synthetic seeds disjoint
_STREAM = {Phase.TRAIN: 0, Phase.VAL: 1, Phase.TEST: 2}


class EpisodeSamplingError(RuntimeError):
    """No class in the phase can supply the requested episode."""
    pass


@dataclass
class EpisodeData:
    """
    An episode with its input rows; every row covers `row_stride` frames.

    Row 0 starts `frame_offset` frames before query frame 0 (feature containers are
    on a fixed step grid, so a trimmed query need not start on a step boundary).
    """
    episode: Episode
    query: npt.NDArray[np.float32]
    supports: list[npt.NDArray[np.float32]]
    row_stride: int
    frame_offset: float = 0.0

    @property
    def gt_array(self) -> FloatArray:
        return segments_to_array(list(self.episode.gt_segments))

    @property
    def row_gt_array(self) -> FloatArray:
        """Ground truth in row coordinates."""
        return self.gt_array + self.frame_offset

    @property
    def num_frames(self) -> int:
        return self.episode.query.num_frames

    @property
    def extent(self) -> float:
        """Length of the query in row coordinates."""
        return self.num_frames + self.frame_offset


class EpisodeSource(Protocol):
    phase: Phase

    def get(self, index: int) -> EpisodeData: ...


# ---------------------------------------------------------------------------
# Real data


def _support_clips(videos: Sequence[AnnotatedVideo]) -> dict[str, list[SupportClip]]:
    clips: dict[str, list[SupportClip]] = {}
    for video in sorted(videos, key=lambda v: v.video_id):
        for inst in sorted(video.instances, key=lambda i: i.segment):
            clips.setdefault(inst.label, []).append(SupportClip(video, inst.segment, inst.label))
    return clips


def _episode_rng(phase: Phase, index_or_seed: int) -> random.Random:
    if phase is Phase.TRAIN:
        return random.Random(index_or_seed)
    return random.Random(f"{phase.value}:{index_or_seed}")


def sample_episode(
    phase: Phase,
    data: SplitData,
    num_supports: int,
    index_or_seed: int,
    noisy_count: int = 0,
    noisy_same_class: bool = False,
    image_support: bool = False,
) -> Episode:
    """
    Pair supports and a query from one phase.

    Supports never come from the query's source video. `noisy_count` of the N
    supports are replaced by clips of other classes (one shared wrong class with
    `noisy_same_class`, otherwise distinct wrong classes).

    Raises:
        EpisodeSamplingError: no class has enough candidates
    """
    if num_supports < 1 or not 0 <= noisy_count <= num_supports:
        raise EpisodeSamplingError(f"Invalid support counts: N={num_supports}, noisy={noisy_count}")
    rng = _episode_rng(phase, index_or_seed)
    videos = sorted(data.phase_videos(phase), key=lambda v: v.video_id)
    clips = _support_clips(videos)
    phase_classes = data.split.classes(phase)
    n_clean = num_supports - noisy_count

    def usable(label: str, query: AnnotatedVideo) -> list[SupportClip]:
        return [c for c in clips.get(label, []) if c.video.feature_source != query.feature_source]

    def noisy_ok(common: str, query: AnnotatedVideo) -> bool:
        if noisy_count == 0:
            return True
        others = [len(usable(c, query)) for c in sorted(phase_classes) if c != common]
        if noisy_same_class:
            return any(n >= noisy_count for n in others)
        return sum(1 for n in others if n > 0) >= noisy_count

    candidates: dict[str, list[AnnotatedVideo]] = {}
    for label in sorted(phase_classes):
        queries = [
            v for v in videos
            if label in v.labels and len(usable(label, v)) >= n_clean and noisy_ok(label, v)
        ]
        if queries:
            candidates[label] = queries
        elif label in clips:
            log.debug(f"{phase.value}: class {label} has too few support candidates, skipped")
    if not candidates:
        raise EpisodeSamplingError(
            f"No {phase.value} class has {n_clean} support clips outside some query video"
        )

    common = rng.choice(sorted(candidates))
    query = rng.choice(candidates[common])
    supports = rng.sample(usable(common, query), n_clean)

    if noisy_count:
        others = [c for c in sorted(phase_classes) if c != common and usable(c, query)]
        if noisy_same_class:
            wrong = rng.choice([c for c in others if len(usable(c, query)) >= noisy_count])
            supports += [
                SupportClip(c.video, c.segment, c.label, noisy=True)
                for c in rng.sample(usable(wrong, query), noisy_count)
            ]
        else:
            for wrong in rng.sample(others, noisy_count):
                c = rng.choice(usable(wrong, query))
                supports.append(SupportClip(c.video, c.segment, c.label, noisy=True))
        rng.shuffle(supports)

    return Episode(
        episode_id=f"{phase.value}-{index_or_seed}",
        phase=phase,
        supports=tuple(supports),
        query=query,
        common_class=common,
        gt_segments=tuple(query.segments_of(common)),
        image_support=image_support,
    )


class FeatureEpisodeSource:
    """Episodes from a split manifest plus a directory of `<video_id>.feat` containers."""

    def __init__(
        self,
        data: SplitData,
        features_dir: str | Path,
        phase: Phase,
        num_supports: int,
        channels: int,
        noisy_count: int = 0,
        noisy_same_class: bool = False,
        image_support: bool = False,
        seed: int = 0,
    ):
        self.data = data
        self.features_dir = Path(features_dir)
        self.phase = phase
        self.num_supports = num_supports
        self.channels = channels
        self.noisy_count = noisy_count
        self.noisy_same_class = noisy_same_class
        self.image_support = image_support
        self.seed = seed
        self._cache: dict[str, FrameFeatures] = {}

    def _features(self, video_id: str) -> FrameFeatures:
        if video_id not in self._cache:
            self._cache[video_id] = load_precomputed(
                self.features_dir / f"{video_id}{FEATURE_SUFFIX}", self.channels
            )
        return self._cache[video_id]

    def _rows(self, video: AnnotatedVideo, start: float, end: float) -> tuple[npt.NDArray[np.float32], float]:
        """Rows covering [start, end] of `video` and the frames row 0 starts before `start`."""
        feats = self._features(video.feature_source)
        first = video.offset_frames + start
        lo = int(math.floor(first / feats.stride))
        hi = int(math.ceil((video.offset_frames + end) / feats.stride))
        lo = min(max(lo, 0), feats.num_steps - 1)
        hi = min(max(hi, lo + 1), feats.num_steps)
        return feats.values[lo:hi], first - lo * feats.stride

    def get(self, index: int) -> EpisodeData:
        seed = self.seed * 1_000_003 + index if self.phase is Phase.TRAIN else index
        episode = sample_episode(
            self.phase, self.data, self.num_supports, seed,
            self.noisy_count, self.noisy_same_class, self.image_support,
        )
        query = episode.query
        supports = []
        for clip in episode.supports:
            rows, _ = self._rows(clip.video, clip.segment.start, clip.segment.end)
            supports.append(rows[len(rows) // 2 : len(rows) // 2 + 1] if episode.image_support else rows)
        stride = self._features(query.feature_source).stride
        rows, offset = self._rows(query, 0.0, float(query.num_frames))
        if offset:
            log.debug(f"{query.video_id}: rows start {offset:g} frames before the query")
        return EpisodeData(episode, rows, supports, stride, frame_offset=offset)


# ---------------------------------------------------------------------------
# Synthetic data


def _embedding(rng: np.random.Generator, dim: int) -> npt.NDArray[np.float64]:
    """Unit vector in the positive orthant."""
    g = np.abs(rng.standard_normal(dim))
    return g / np.linalg.norm(g)


def _place_segments(
    rng: np.random.Generator, count: int, num_steps: int, min_len: int, max_len: int
) -> list[tuple[int, int]]:
    """Non-overlapping [start, end) step ranges, by rejection."""
    placed: list[tuple[int, int]] = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > 1000:
            raise EpisodeSamplingError(
                f"Cannot place {count} segments of {min_len}-{max_len} steps in {num_steps} steps"
            )
        length = int(rng.integers(min(min_len, num_steps), min(max_len, num_steps) + 1))
        start = int(rng.integers(0, num_steps - length + 1))
        if all(start >= e or start + length <= s for s, e in placed):
            placed.append((start, start + length))
    return placed


def synthesize_episode(
    config: SyntheticConfig,
    num_supports: int,
    dim: int,
    seed: int | Sequence[int],
    stride: int = 8,
    phase: Phase = Phase.TRAIN,
    noisy_count: int = 0,
    noisy_same_class: bool = False,
    image_support: bool = False,
) -> EpisodeData:
    """
    Draw one synthetic episode, fully determined by `seed`.

    The common class is a unit embedding; query rows inside ground truth are the
    embedding plus Gaussian noise, other rows pure noise (distractor segments carry
    other embeddings). Supports are the same embedding plus independent noise. GT
    boundaries lie on the `stride`-frame step grid. With `frame_level` one row per
    frame is produced, otherwise one row per step.
    """
    rng = np.random.default_rng(seed)
    num_steps = config.num_frames // stride
    if num_steps < 1:
        raise EpisodeSamplingError(f"num_frames {config.num_frames} shorter than one {stride}-frame step")
    rows_per_step = stride if config.frame_level else 1
    row_stride = 1 if config.frame_level else stride
    std = config.noise_std

    common = _embedding(rng, dim)
    ranges = _place_segments(
        rng, config.num_gt + config.num_distractors, num_steps, config.gt_steps_min, config.gt_steps_max
    )
    gt_ranges, distractor_ranges = ranges[: config.num_gt], ranges[config.num_gt :]

    query = rng.normal(0.0, std, size=(num_steps * rows_per_step, dim))
    instances = []
    for s, e in gt_ranges:
        query[s * rows_per_step : e * rows_per_step] += common
        instances.append(Instance(COMMON_LABEL, TemporalSegment(s * stride, e * stride)))
    for k, (s, e) in enumerate(distractor_ranges):
        query[s * rows_per_step : e * rows_per_step] += _embedding(rng, dim)
        instances.append(Instance(f"distractor-{k}", TemporalSegment(s * stride, e * stride)))

    def draw_support(embedding: npt.NDArray[np.float64]) -> npt.NDArray[np.float32]:
        steps = 1 if image_support else int(rng.integers(config.support_steps_min, config.support_steps_max + 1))
        rows = 1 if image_support else steps * rows_per_step
        noise = rng.normal(0.0, std, size=(rows, dim))
        return (embedding + noise).astype(np.float32)

    n_clean = num_supports - noisy_count
    supports = [draw_support(common) for _ in range(n_clean)]
    labels = [COMMON_LABEL] * n_clean
    shared_wrong = _embedding(rng, dim) if noisy_count and noisy_same_class else None
    for k in range(noisy_count):
        wrong = shared_wrong if shared_wrong is not None else _embedding(rng, dim)
        supports.append(draw_support(wrong))
        labels.append("noise" if shared_wrong is not None else f"noise-{k}")

    tag = "-".join(str(s) for s in np.atleast_1d(np.asarray(seed)).tolist())
    query_video = AnnotatedVideo(
        f"synthetic-{tag}", num_steps * stride, SYNTHETIC_FPS, tuple(sorted(instances, key=lambda i: i.segment))
    )
    clips = []
    for i, (feats, label) in enumerate(zip(supports, labels, strict=True)):
        frames = max(1, len(feats)) * row_stride
        video = AnnotatedVideo(
            f"synthetic-{tag}-s{i}", frames, SYNTHETIC_FPS, (Instance(label, TemporalSegment(0, frames)),)
        )
        clips.append(SupportClip(video, TemporalSegment(0, frames), label, noisy=label != COMMON_LABEL))

    episode = Episode(
        episode_id=f"synthetic-{tag}",
        phase=phase,
        supports=tuple(clips),
        query=query_video,
        common_class=COMMON_LABEL,
        gt_segments=tuple(query_video.segments_of(COMMON_LABEL)),
        image_support=image_support,
    )
    return EpisodeData(episode, query.astype(np.float32), supports, row_stride)


class SyntheticEpisodeSource:
    """Seeded synthetic episodes; training and held-out phases draw from disjoint seed streams."""

    def __init__(
        self,
        cfg: RunConfig,
        phase: Phase,
        num_supports: int | None = None,
        noisy_count: int = 0,
        noisy_same_class: bool = False,
        image_support: bool = False,
    ):
        self.cfg = cfg
        self.phase = phase
        self.num_supports = num_supports or cfg.train.num_supports
        self.noisy_count = noisy_count
        self.noisy_same_class = noisy_same_class
        self.image_support = image_support
        model = cfg.model
        self.dim = model.input_channels if model.backbone == "encoder" else model.channels

    def seed_for(self, index: int) -> list[int]:
        base = self.cfg.train.seed if self.phase is Phase.TRAIN else self.cfg.synthetic.eval_seed
        return [_STREAM[self.phase], base, index]

    def get(self, index: int) -> EpisodeData:
        return synthesize_episode(
            self.cfg.synthetic,
            self.num_supports,
            self.dim,
            self.seed_for(index),
            stride=self.cfg.anchors.stride,
            phase=self.phase,
            noisy_count=self.noisy_count,
            noisy_same_class=self.noisy_same_class,
            image_support=self.image_support,
        )


def build_source(cfg: RunConfig, phase: Phase, num_supports: int | None = None) -> EpisodeSource:
    """
    Episode source for `phase` as configured.

    Noisy and image supports only apply to held-out phases.
    """
    n = num_supports or cfg.train.num_supports
    held_out = phase is not Phase.TRAIN
    noisy = cfg.eval.noisy_count if held_out else 0
    same_class = cfg.eval.noisy_same_class and held_out
    image = cfg.eval.image_support and held_out
    if cfg.data.source == "synthetic":
        return SyntheticEpisodeSource(cfg, phase, n, noisy, same_class, image)

    if not cfg.data.manifest or not cfg.data.features_dir:
        raise EpisodeSamplingError("data.manifest and data.features_dir are required for feature episodes")
    model = cfg.model
    channels = model.input_channels if model.backbone == "encoder" else model.channels
    return FeatureEpisodeSource(
        read_manifest(cfg.data.manifest),
        cfg.data.features_dir,
        phase,
        n,
        channels,
        noisy_count=noisy,
        noisy_same_class=same_class,
        image_support=image,
        seed=cfg.train.seed,
    )

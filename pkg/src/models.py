"""
Data models for commonloc.

Value types shared by every stage of the pipeline: temporal segments and their
scored/offset forms, annotated videos, class splits, episodes and prediction sets.
All of them are immutable; the numeric stages work on numpy/torch arrays and
convert at their boundaries.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class ContractViolation(ValueError):
    """Raised when an operation is called outside its preconditions."""
    pass


class Phase(Enum):
    """Dataset phases; classes never cross phases."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True, order=True)
class TemporalSegment:
    """Closed interval [start, end] in frames."""
    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ContractViolation(f"Segment bounds must be finite: [{self.start}, {self.end}]")
        if self.start < 0:
            raise ContractViolation(f"Segment start must be >= 0: [{self.start}, {self.end}]")
        if self.start >= self.end:
            raise ContractViolation(f"Segment start must precede end: [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def shifted(self, offset: float) -> "TemporalSegment":
        return TemporalSegment(self.start + offset, self.end + offset)

    def as_list(self) -> list[float]:
        return [float(self.start), float(self.end)]


@dataclass(frozen=True)
class ScoredSegment:
    """A segment with a confidence in [0, 1]."""
    segment: TemporalSegment
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ContractViolation(f"Score must lie in [0, 1], got {self.score}")

    def to_dict(self) -> dict[str, Any]:
        return {"segment": self.segment.as_list(), "score": float(self.score)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScoredSegment":
        start, end = data["segment"]
        return cls(TemporalSegment(float(start), float(end)), float(data["score"]))


@dataclass(frozen=True)
class OffsetPair:
    """Center shift relative to proposal length, and log length ratio."""
    delta_center: float
    delta_length: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.delta_center) and math.isfinite(self.delta_length)):
            raise ContractViolation(
                f"Offsets must be finite: ({self.delta_center}, {self.delta_length})"
            )


@dataclass(frozen=True)
class Instance:
    """One annotated action instance."""
    label: str
    segment: TemporalSegment


@dataclass(frozen=True)
class AnnotatedVideo:
    """
    A video with frame-unit action annotations.

    Derived videos (common-instance clips) remember the video they were cut from:
    `source_id` names it and `offset_frames` is where the clip starts in it.
    """
    video_id: str
    num_frames: int
    fps: float
    instances: tuple[Instance, ...] = ()
    source_id: str | None = None
    offset_frames: int = 0

    def __post_init__(self) -> None:
        if self.num_frames < 1:
            raise ContractViolation(f"{self.video_id}: num_frames must be positive")
        if self.fps <= 0:
            raise ContractViolation(f"{self.video_id}: fps must be positive")
        for inst in self.instances:
            if inst.segment.end > self.num_frames:
                raise ContractViolation(
                    f"{self.video_id}: instance {inst.label} ends at {inst.segment.end} "
                    f"beyond {self.num_frames} frames"
                )

    @property
    def feature_source(self) -> str:
        """Video id whose features back this video."""
        return self.source_id or self.video_id

    @property
    def labels(self) -> set[str]:
        return {inst.label for inst in self.instances}

    def segments_of(self, label: str) -> list[TemporalSegment]:
        return [inst.segment for inst in self.instances if inst.label == label]

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "video_id": self.video_id,
            "num_frames": self.num_frames,
            "fps": self.fps,
            "instances": [
                {"label": inst.label, "segment": inst.segment.as_list()}
                for inst in self.instances
            ],
        }
        if self.source_id is not None:
            data["source_id"] = self.source_id
            data["offset_frames"] = self.offset_frames
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AnnotatedVideo":
        return cls(
            video_id=data["video_id"],
            num_frames=int(data["num_frames"]),
            fps=float(data["fps"]),
            instances=tuple(
                Instance(i["label"], TemporalSegment(*map(float, i["segment"])))
                for i in data["instances"]
            ),
            source_id=data.get("source_id"),
            offset_frames=int(data.get("offset_frames", 0)),
        )


@dataclass(frozen=True)
class ClassSplit:
    """Pairwise-disjoint class sets per phase."""
    train_classes: frozenset[str]
    val_classes: frozenset[str]
    test_classes: frozenset[str]

    def __post_init__(self) -> None:
        overlaps = (
            (self.train_classes & self.val_classes)
            | (self.train_classes & self.test_classes)
            | (self.val_classes & self.test_classes)
        )
        if overlaps:
            raise ContractViolation(f"Class split phases overlap: {sorted(overlaps)}")

    def classes(self, phase: Phase) -> frozenset[str]:
        return {
            Phase.TRAIN: self.train_classes,
            Phase.VAL: self.val_classes,
            Phase.TEST: self.test_classes,
        }[phase]

    def phase_of(self, label: str) -> Phase | None:
        for phase in Phase:
            if label in self.classes(phase):
                return phase
        return None

    @property
    def all_classes(self) -> frozenset[str]:
        return self.train_classes | self.val_classes | self.test_classes


@dataclass(frozen=True)
class SupportClip:
    """A trimmed support video: one instance cut out of an annotated video."""
    video: AnnotatedVideo
    segment: TemporalSegment
    label: str
    noisy: bool = False


@dataclass(frozen=True)
class Episode:
    """One few-shot task: N supports, a query, and the hidden common class."""
    episode_id: str
    phase: Phase
    supports: tuple[SupportClip, ...]
    query: AnnotatedVideo
    common_class: str
    gt_segments: tuple[TemporalSegment, ...]
    image_support: bool = False

    def __post_init__(self) -> None:
        if not self.supports:
            raise ContractViolation("An episode needs at least one support video")

    @property
    def num_supports(self) -> int:
        return len(self.supports)


@dataclass
class PredictionSet:
    """Scored segments for one query video, sorted by descending score."""
    video_id: str
    predictions: list[ScoredSegment] = field(default_factory=list)

    def top(self, k: int = 1) -> list[ScoredSegment]:
        return self.predictions[:k]

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "predictions": [p.to_dict() for p in self.predictions],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PredictionSet":
        return cls(
            video_id=data["video_id"],
            predictions=[ScoredSegment.from_dict(p) for p in data["predictions"]],
        )

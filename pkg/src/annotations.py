"""
Annotation ingestion.

Two on-disk layouts are understood:

- ActivityNet style: one JSON document mapping video id to
  `{"num_frames" | "duration" (+ "fps"), "annotations": [{"label", "segment": [s, e]}]}`,
  optionally wrapped in a top-level `"database"` key. Segments are in seconds.
- Thumos style: a directory of per-class files `<Class>_<subset>.txt` with lines
  `<video> <start_sec> <end_sec>`, plus `video_info.csv` with rows
  `<video>,<fps>,<num_frames>`.

Both produce `AnnotatedVideo` records in frame units.
"""

import csv
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any

from .models import AnnotatedVideo, ContractViolation, Instance, TemporalSegment

log = logging.getLogger("commonloc.annotations")

VIDEO_INFO_FILE = "video_info.csv"
# Thumos ships an "Ambiguous" pseudo-class that is not an action
IGNORED_THUMOS_CLASSES = frozenset({"Ambiguous"})


class AnnotationFormat(Enum):
    ACTIVITYNET = "activitynet"
    THUMOS = "thumos"


class AnnotationParseError(ValueError):
    """Malformed annotation input; the message names the file and record."""

    def __init__(self, source: str | Path, where: str, reason: str):
        self.source = str(source)
        self.where = where
        self.reason = reason
        super().__init__(f"{source}: {where}: {reason}")


def _to_instance(
    video_id: str, label: str, start_sec: float, end_sec: float, fps: float, num_frames: int
) -> Instance | None:
    """Convert a seconds-unit annotation; None (with a warning) when it does not fit the video."""
    start, end = start_sec * fps, end_sec * fps
    if not (math.isfinite(start) and math.isfinite(end)) or start < 0 or end > num_frames or start >= end:
        log.warning(
            f"{video_id}: skipping {label} [{start_sec}, {end_sec}]s, "
            f"outside video extent of {num_frames} frames"
        )
        return None
    return Instance(label, TemporalSegment(start, end))


def parse_activitynet(path: str | Path, default_fps: float | None = None) -> list[AnnotatedVideo]:
    """Parse an ActivityNet-style JSON annotation document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise AnnotationParseError(path, f"line {e.lineno}", e.msg) from e
    if isinstance(doc, dict) and isinstance(doc.get("database"), dict):
        doc = doc["database"]
    if not isinstance(doc, dict):
        raise AnnotationParseError(path, "top level", "expected an object of video records")

    videos: list[AnnotatedVideo] = []
    for video_id, record in doc.items():
        videos.append(_parse_activitynet_record(path, str(video_id), record, default_fps))
    log.info(f"Parsed {len(videos)} videos from {path}")
    return videos


def _parse_activitynet_record(
    path: Path, video_id: str, record: Any, default_fps: float | None
) -> AnnotatedVideo:
    where = f"record {video_id!r}"
    if not isinstance(record, dict):
        raise AnnotationParseError(path, where, "expected an object")
    try:
        fps = float(record.get("fps") or default_fps or 0.0)
        if "num_frames" in record:
            num_frames = int(record["num_frames"])
        elif "duration" in record and fps > 0:
            num_frames = int(round(float(record["duration"]) * fps))
        else:
            raise AnnotationParseError(path, where, "needs num_frames, or duration with fps")
        if fps <= 0:
            raise AnnotationParseError(path, where, "no fps given and no default fps configured")

        instances: list[Instance] = []
        for ann in record.get("annotations", []):
            start_sec, end_sec = (float(v) for v in ann["segment"])
            inst = _to_instance(video_id, str(ann["label"]), start_sec, end_sec, fps, num_frames)
            if inst is not None:
                instances.append(inst)
        return AnnotatedVideo(video_id, num_frames, fps, tuple(instances))
    except AnnotationParseError:
        raise
    except (KeyError, TypeError, ValueError, ContractViolation) as e:
        raise AnnotationParseError(path, where, f"{type(e).__name__}: {e}") from e


def _read_video_info(directory: Path) -> dict[str, tuple[float, int]]:
    info_path = directory / VIDEO_INFO_FILE
    if not info_path.exists():
        raise AnnotationParseError(directory, VIDEO_INFO_FILE, "missing video info file")
    info: dict[str, tuple[float, int]] = {}
    with info_path.open(newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                info[row[0].strip()] = (float(row[1]), int(float(row[2])))
            except (IndexError, ValueError) as e:
                if lineno == 1:
                    continue  # header row
                raise AnnotationParseError(info_path, f"line {lineno}", f"bad row {row}") from e
    return info


def parse_thumos(path: str | Path) -> list[AnnotatedVideo]:
    """Parse a Thumos-style annotation directory."""
    directory = Path(path)
    if not directory.is_dir():
        raise AnnotationParseError(directory, "path", "expected an annotation directory")
    video_info = _read_video_info(directory)

    per_video: dict[str, list[Instance]] = {vid: [] for vid in video_info}
    for class_file in sorted(directory.glob("*.txt")):
        label = class_file.stem.rsplit("_", 1)[0]
        if label in IGNORED_THUMOS_CLASSES:
            continue
        for lineno, line in enumerate(class_file.read_text().splitlines(), start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise AnnotationParseError(class_file, f"line {lineno}", f"expected 3 fields, got {len(fields)}")
            video_id = fields[0]
            if video_id not in video_info:
                raise AnnotationParseError(class_file, f"line {lineno}", f"unknown video {video_id}")
            try:
                start_sec, end_sec = float(fields[1]), float(fields[2])
            except ValueError as e:
                raise AnnotationParseError(class_file, f"line {lineno}", str(e)) from e
            fps, num_frames = video_info[video_id]
            inst = _to_instance(video_id, label, start_sec, end_sec, fps, num_frames)
            if inst is not None:
                per_video[video_id].append(inst)

    videos = [
        AnnotatedVideo(vid, video_info[vid][1], video_info[vid][0], tuple(sorted(insts, key=lambda i: i.segment)))
        for vid, insts in sorted(per_video.items())
    ]
    log.info(f"Parsed {len(videos)} videos from {directory}")
    return videos


def ingest_annotations(
    path: str | Path,
    fmt: AnnotationFormat | str,
    default_fps: float | None = None,
) -> list[AnnotatedVideo]:
    """
    Load annotated videos from `path`.

    Instances outside their video's extent are dropped with a warning; anything
    structurally malformed raises AnnotationParseError naming the record.
    """
    fmt = AnnotationFormat(fmt)
    if fmt is AnnotationFormat.ACTIVITYNET:
        return parse_activitynet(path, default_fps)
    return parse_thumos(path)


def class_labels(videos: list[AnnotatedVideo]) -> set[str]:
    return {label for video in videos for label in video.labels}

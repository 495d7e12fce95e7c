"""
Class splits and dataset reorganization.

Fixed splits reproduce the published class lists for ActivityNet-style and
Thumos-style data; random splits are an 80/10/10 seeded shuffle. The two
reorganizers build the common-instance (one action per video) and multi-instance
(videos kept whole) variants and assign every video to exactly one phase.
"""

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .models import AnnotatedVideo, ClassSplit, ContractViolation, Instance, Phase

log = logging.getLogger("commonloc.splits")

MANIFEST_SCHEMA_VERSION = 1


class SplitError(ValueError):
    """Raised when a class split cannot be built from the given classes."""
    pass


ACTIVITYNET_TRAIN = (
    "Fun sliding down",
    "Beer pong",
    "Getting a piercing",
    "Shoveling snow",
    "Kneeling",
    "Tumbling",
    "Playing water polo",
    "Washing dishes",
    "Blowing leaves",
    "Playing congas",
    "Making a lemonade",
    "Playing kickball",
    "Removing ice from car",
    "Playing racquetball",
    "Swimming",
    "Playing bagpipes",
    "Painting",
    "Assembling bicycle",
    "Playing violin",
    "Surfing",
    "Making a sandwich",
    "Welding",
    "Hopscotch",
    "Gargling mouthwash",
    "Baking cookies",
    "Braiding hair",
    "Capoeira",
    "Slacklining",
    "Plastering",
    "Changing car wheel",
    "Chopping wood",
    "Removing curlers",
    "Horseback riding",
    "Smoking hookah",
    "Doing a powerbomb",
    "Playing ten pins",
    "Getting a haircut",
    "Playing beach volleyball",
    "Making a cake",
    "Clean and jerk",
    "Trimming branches or hedges",
    "Drum corps",
    "Windsurfing",
    "Kite flying",
    "Using parallel bars",
    "Doing kickboxing",
    "Cleaning shoes",
    "Playing field hockey",
    "Playing squash",
    "Rollerblading",
    "Playing drums",
    "Playing rubik cube",
    "Sharpening knives",
    "Zumba",
    "Raking leaves",
    "Bathing dog",
    "Tug of war",
    "Ping-pong",
    "Using the balance beam",
    "Playing lacrosse",
    "Scuba diving",
    "Preparing pasta",
    "Brushing teeth",
    "Playing badminton",
    "Mixing drinks",
    "Discus throw",
    "Playing ice hockey",
    "Doing crunches",
    "Wrapping presents",
    "Hand washing clothes",
    "Rock climbing",
    "Cutting the grass",
    "Wakeboarding",
    "Futsal",
    "Playing piano",
    "Baton twirling",
    "Mooping floor",
    "Triple jump",
    "Longboarding",
    "Polishing shoes",
    "Doing motocross",
    "Arm wrestling",
    "Doing fencing",
    "Hammer throw",
    "Shot put",
    "Playing pool",
    "Blow-drying hair",
    "Cricket",
    "Spinning",
    "Running a marathon",
    "Table soccer",
    "Playing flauta",
    "Ice fishing",
    "Tai chi",
    "Archery",
    "Shaving",
    "Using the monkey bar",
    "Layup drill in basketball",
    "Spread mulch",
    "Skateboarding",
    "Canoeing",
    "Mowing the lawn",
    "Beach soccer",
    "Hanging wallpaper",
    "Tango",
    "Disc dog",
    "Powerbocking",
    "Getting a tattoo",
    "Doing nails",
    "Snowboarding",
    "Putting on shoes",
    "Clipping cat claws",
    "Snow tubing",
    "River tubing",
    "Putting on makeup",
    "Decorating the Christmas tree",
    "Fixing bicycle",
    "Hitting a pinata",
    "High jump",
    "Doing karate",
    "Kayaking",
    "Grooming dog",
    "Bungee jumping",
    "Washing hands",
    "Painting fence",
    "Doing step aerobics",
    "Installing carpet",
    "Playing saxophone",
    "Long jump",
    "Javelin throw",
    "Playing accordion",
    "Smoking a cigarette",
    "Belly dance",
    "Playing polo",
    "Throwing darts",
    "Roof shingle removal",
    "Tennis serve with ball bouncing",
    "Skiing",
    "Peeling potatoes",
    "Elliptical trainer",
    "Building sandcastles",
    "Drinking beer",
    "Rock-paper-scissors",
    "Using the pommel horse",
    "Croquet",
    "Laying tile",
    "Cleaning windows",
    "Fixing the roof",
    "Springboard diving",
    "Waterskiing",
    "Using uneven bars",
    "Having an ice cream",
    "Sailing",
    "Washing face",
    "Knitting",
    "Bullfighting",
    "Applying sunscreen",
    "Painting furniture",
    "Grooming horse",
    "Carving jack-o-lanterns",
)

ACTIVITYNET_VAL = (
    "Swinging at the playground",
    "Dodgeball",
    "Ballet",
    "Playing harmonica",
    "Paintball",
    "Cumbia",
    "Rafting",
    "Hula hoop",
    "Cheerleading",
    "Vacuuming floor",
    "Playing blackjack",
    "Waxing skis",
    "Curling",
    "Using the rowing machine",
    "Ironing clothes",
    "Playing guitarra",
    "Sumo",
    "Putting in contact lenses",
    "Brushing hair",
    "Volleyball",
)

ACTIVITYNET_TEST = (
    "Hurling",
    "Polishing forniture",
    "BMX",
    "Riding bumper cars",
    "Starting a campfire",
    "Walking the dog",
    "Preparing salad",
    "Plataform diving",
    "Breakdancing",
    "Camel ride",
    "Hand car wash",
    "Making an omelette",
    "Shuffleboard",
    "Calf roping",
    "Shaving legs",
    "Snatch",
    "Cleaning sink",
    "Rope skipping",
    "Drinking coffee",
    "Pole vault",
)

THUMOS_TRAIN = (
    "BaseballPitch",
    "BasketballDunk",
    "Billiards",
    "CleanAndJerk",
    "CliffDiving",
    "CricketBowling",
    "CricketShot",
    "Diving",
    "FrisbeeCatch",
    "GolfSwing",
    "HammerThrow",
    "HighJump",
    "JavelinThrow",
    "LongJump",
    "PoleVault",
    "Shotput",
)
THUMOS_VAL = ("SoccerPenalty", "TennisSwing")
THUMOS_TEST = ("ThrowDiscus", "VolleyballSpiking")

FIXED_SPLITS: dict[str, tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = {
    "activitynet": (ACTIVITYNET_TRAIN, ACTIVITYNET_VAL, ACTIVITYNET_TEST),
    "thumos": (THUMOS_TRAIN, THUMOS_VAL, THUMOS_TEST),
}


def fixed_split(dataset: str) -> ClassSplit:
    """The published split for `dataset` ("activitynet" or "thumos")."""
    try:
        train, val, test = FIXED_SPLITS[dataset]
    except KeyError as e:
        raise SplitError(f"No fixed split for dataset {dataset!r}; known: {sorted(FIXED_SPLITS)}") from e
    return ClassSplit(frozenset(train), frozenset(val), frozenset(test))


def _guess_dataset(classes: set[str]) -> str:
    overlap = {
        name: len(classes & set[str]().union(*lists)) for name, lists in FIXED_SPLITS.items()
    }
    return max(sorted(overlap), key=lambda name: overlap[name])


def split_classes(
    classes: set[str],
    mode: str = "fixed",
    seed: int = 0,
    dataset: str | None = None,
) -> ClassSplit:
    """
    Partition class labels into train/val/test.

    mode="random" shuffles the sorted labels with `seed` and cuts 80/10/10 (val and
    test get at least one class each). mode="fixed" returns the published lists for
    `dataset` (guessed from the labels when omitted); every listed class must be
    present in `classes`, and labels outside the lists are dropped with a warning.
    """
    if len(classes) < 3:
        raise SplitError(f"Need at least 3 classes to split, got {len(classes)}")

    if mode == "random":
        ordered = sorted(classes)
        random.Random(seed).shuffle(ordered)
        n_val = max(1, round(0.1 * len(ordered)))
        n_test = max(1, round(0.1 * len(ordered)))
        n_train = len(ordered) - n_val - n_test
        return ClassSplit(
            frozenset(ordered[:n_train]),
            frozenset(ordered[n_train : n_train + n_val]),
            frozenset(ordered[n_train + n_val :]),
        )

    if mode != "fixed":
        raise SplitError(f"Unknown split mode {mode!r}")

    split = fixed_split(dataset or _guess_dataset(classes))
    missing = split.all_classes - classes
    if missing:
        raise SplitError(f"Fixed split classes missing from input: {sorted(missing)}")
    extra = classes - split.all_classes
    if extra:
        log.warning(f"Dropping {len(extra)} classes outside the fixed split: {sorted(extra)[:10]}")
    return split


@dataclass
class SplitData:
    """Reorganized videos per phase, plus the split they were built from."""
    split: ClassSplit
    variant: str
    videos: dict[Phase, list[AnnotatedVideo]] = field(default_factory=dict)

    def phase_videos(self, phase: Phase) -> list[AnnotatedVideo]:
        return self.videos.get(phase, [])

    def summary(self) -> dict[str, dict[str, int]]:
        return {
            phase.value: {
                "classes": len(self.split.classes(phase)),
                "videos": len(self.phase_videos(phase)),
                "instances": sum(len(v.instances) for v in self.phase_videos(phase)),
            }
            for phase in Phase
        }


def _clip_bounds(
    ordered: list[Instance], i: int, num_frames: int
) -> tuple[int, int] | None:
    """Integer frame bounds around instance i, halfway toward its neighbours."""
    inst = ordered[i].segment
    prev_end = max((o.segment.end for o in ordered[:i]), default=None)
    next_start = min((o.segment.start for o in ordered[i + 1 :]), default=None)
    if (prev_end is not None and prev_end > inst.start) or (next_start is not None and next_start < inst.end):
        return None

    if prev_end is None:
        left = 0
    else:
        left = min(math.ceil(0.5 * (prev_end + inst.start)), math.floor(inst.start))
    if next_start is None:
        right = num_frames
    else:
        right = max(math.floor(0.5 * (inst.end + next_start)), math.ceil(inst.end))
    return left, min(right, num_frames)


def reorganize_common_instance(
    videos: list[AnnotatedVideo],
    split: ClassSplit,
    max_frames: int = 768,
) -> SplitData:
    """
    Cut every video into single-instance clips.

    Each instance keeps the background up to the midpoint toward its neighbouring
    instances. A video with one instance is kept as is. Clips longer than
    `max_frames` are discarded, overlapping instances cannot be isolated and are
    skipped, and each clip goes to the phase of its instance's class.
    """
    out: dict[Phase, list[AnnotatedVideo]] = {phase: [] for phase in Phase}
    discarded = overlapping = unassigned = 0

    for video in videos:
        ordered = sorted(video.instances, key=lambda inst: inst.segment)
        for i, inst in enumerate(ordered):
            phase = split.phase_of(inst.label)
            if phase is None:
                unassigned += 1
                continue

            if len(ordered) == 1:
                derived = video
            else:
                bounds = _clip_bounds(ordered, i, video.num_frames)
                if bounds is None:
                    overlapping += 1
                    continue
                left, right = bounds
                derived = AnnotatedVideo(
                    video_id=f"{video.video_id}#{i}",
                    num_frames=right - left,
                    fps=video.fps,
                    instances=(Instance(inst.label, inst.segment.shifted(-left)),),
                    source_id=video.feature_source,
                    offset_frames=video.offset_frames + left,
                )

            if derived.num_frames > max_frames:
                discarded += 1
                continue
            out[phase].append(derived)

    log.info(
        "Common-instance reorganization: "
        + ", ".join(f"{p.value}={len(v)}" for p, v in out.items())
        + f" (discarded {discarded} > {max_frames} frames, {overlapping} overlapping, {unassigned} unassigned)"
    )
    return SplitData(split=split, variant="common", videos=out)


def majority_phase(video: AnnotatedVideo, split: ClassSplit) -> Phase | None:
    """
    Phase of the video's most frequent split class.

    Classes outside the split are not counted. When several classes share the top
    count and their phases differ, the video goes to train.
    """
    counts = Counter(inst.label for inst in video.instances if split.phase_of(inst.label) is not None)
    if not counts:
        return None
    best = max(counts.values())
    phases = {split.phase_of(label) for label, count in counts.items() if count == best}
    if len(phases) > 1:
        return Phase.TRAIN
    return phases.pop()


def reorganize_multi_instance(videos: list[AnnotatedVideo], split: ClassSplit) -> SplitData:
    """Keep videos whole; each goes to the phase of its most frequent class."""
    out: dict[Phase, list[AnnotatedVideo]] = {phase: [] for phase in Phase}
    for video in videos:
        phase = majority_phase(video, split)
        if phase is None:
            log.debug(f"{video.video_id}: no instance of a split class, skipped")
            continue
        out[phase].append(video)
    log.info("Multi-instance reorganization: " + ", ".join(f"{p.value}={len(v)}" for p, v in out.items()))
    return SplitData(split=split, variant="multi", videos=out)


def manifest_to_dict(data: SplitData) -> dict[str, Any]:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "variant": data.variant,
        "phases": {
            phase.value: {
                "classes": sorted(data.split.classes(phase)),
                "videos": [
                    v.to_dict() for v in sorted(data.phase_videos(phase), key=lambda v: v.video_id)
                ],
            }
            for phase in Phase
        },
    }


def write_manifest(data: SplitData, path: str | Path) -> Path:
    """Write the split manifest (stable ordering, two-space indent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(data), indent=2) + "\n")
    return path


def read_manifest(path: str | Path) -> SplitData:
    doc = json.loads(Path(path).read_text())
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise SplitError(f"{path}: unsupported manifest schema_version {version}")
    phases = doc["phases"]
    try:
        split = ClassSplit(
            frozenset(phases["train"]["classes"]),
            frozenset(phases["val"]["classes"]),
            frozenset(phases["test"]["classes"]),
        )
    except ContractViolation as e:
        raise SplitError(f"{path}: {e}") from e
    videos = {
        phase: [AnnotatedVideo.from_dict(v) for v in phases[phase.value]["videos"]] for phase in Phase
    }
    return SplitData(split=split, variant=doc["variant"], videos=videos)

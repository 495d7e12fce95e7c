"""
Class-agnostic detection AP over episodes, and result reporting.

Every episode contributes one AP per tIoU threshold (its hidden common action is
the only class); mAP is the mean over episodes. A prediction is a true positive
when its tIoU with a still-unmatched GT is strictly above the threshold.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import numpy.typing as npt  # noqa: E402

from .models import PredictionSet, ScoredSegment, TemporalSegment  # noqa: E402
from .temporal import segments_to_array, tiou_matrix  # noqa: E402

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
RESULT_FILE = "result.json"
RESULT_SCHEMA_VERSION = 1

log = logging.getLogger("commonloc.evaluation")


class EvaluationError(ValueError):
    """Nothing to evaluate."""
    pass


class ReportError(OSError):
    """The report could not be written."""
    pass


@dataclass
class EpisodeResult:
    """Predictions of one episode next to its ground truth."""
    episode_id: str
    predictions: PredictionSet
    gt_segments: list[TemporalSegment]
    num_supports: int = 0


def interpolated_prec_rec(prec: npt.ArrayLike, rec: npt.ArrayLike) -> float:
    """All-points interpolated AP (VOC 2011 and later)."""
    mprec = np.hstack([[0.0], np.asarray(prec, dtype=np.float64), [0.0]])
    mrec = np.hstack([[0.0], np.asarray(rec, dtype=np.float64), [1.0]])
    for i in range(len(mprec) - 1)[::-1]:
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1::] != mrec[0:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def _ranked(predictions: list[ScoredSegment]) -> list[ScoredSegment]:
    # Ties resolve on the segment itself so the ranking ignores insertion order.
    return sorted(predictions, key=lambda p: (-p.score, p.segment.start, p.segment.end))


def match_predictions(
    predictions: list[ScoredSegment],
    gt_segments: list[TemporalSegment],
    threshold: float,
    locked: npt.NDArray[np.bool_] | None = None,
) -> npt.NDArray[np.float64]:
    """
    Greedy matching of ranked predictions: 1.0 for a true positive, 0.0 otherwise.

    Each prediction takes its highest-tIoU GT that is still free; if that tIoU is not
    above `threshold` the prediction is a false positive. `locked` marks GTs that are
    already matched and is updated in place.
    """
    tp = np.zeros(len(predictions), dtype=np.float64)
    if not predictions or not gt_segments:
        return tp
    if locked is None:
        locked = np.zeros(len(gt_segments), dtype=np.bool_)
    overlaps = tiou_matrix(
        segments_to_array([p.segment for p in predictions]), segments_to_array(gt_segments)
    )
    for i in range(len(predictions)):
        for j in np.argsort(-overlaps[i], kind="stable"):
            if overlaps[i, j] <= threshold:
                break
            if locked[j]:
                continue
            tp[i] = 1.0
            locked[j] = True
            break
    return tp


def _ap_from_flags(tp: npt.NDArray[np.float64], num_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    rec = tp_cum / num_gt
    prec = tp_cum / (tp_cum + fp_cum)
    return interpolated_prec_rec(prec, rec)


def episode_ap(predictions: PredictionSet, gt_segments: list[TemporalSegment], threshold: float) -> float | None:
    """
    Detection AP of one episode at `threshold`.

    Returns None (the episode is excluded) when there is no ground truth.
    """
    if not gt_segments:
        log.warning(f"{predictions.video_id}: no ground truth, episode excluded")
        return None
    ranked = _ranked(predictions.predictions)
    return _ap_from_flags(match_predictions(ranked, gt_segments, threshold), len(gt_segments))


def _key(threshold: float) -> str:
    return f"{threshold:g}"


@dataclass
class EvalResult:
    """mAP per threshold, their mean, and the AP of every evaluated episode."""
    thresholds: list[float]
    map: dict[float, float]
    mean_map: float
    per_episode: dict[str, dict[float, float]] = field(default_factory=dict)
    micro: bool = False

    @property
    def num_episodes(self) -> int:
        return len(self.per_episode)

    def to_dict(self) -> dict[str, Any]:
        return {
            "thresholds": list(self.thresholds),
            "map": {_key(t): self.map[t] for t in self.thresholds},
            "mean_map": self.mean_map,
            "micro": self.micro,
            "num_episodes": self.num_episodes,
            "per_episode": [
                {"episode_id": eid, "ap": {_key(t): aps[t] for t in self.thresholds}}
                for eid, aps in self.per_episode.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvalResult":
        thresholds = [float(t) for t in data["thresholds"]]
        return cls(
            thresholds=thresholds,
            map={t: float(data["map"][_key(t)]) for t in thresholds},
            mean_map=float(data["mean_map"]),
            per_episode={
                row["episode_id"]: {t: float(row["ap"][_key(t)]) for t in thresholds}
                for row in data.get("per_episode", [])
            },
            micro=bool(data.get("micro", False)),
        )


def _micro_ap(results: list[EpisodeResult], threshold: float) -> float:
    """One AP over predictions pooled from all episodes; GTs match within their episode."""
    pooled: list[tuple[float, int, ScoredSegment]] = []
    for index, result in enumerate(results):
        pooled.extend((p.score, index, p) for p in result.predictions.predictions)
    pooled.sort(key=lambda item: (-item[0], item[1], item[2].segment.start, item[2].segment.end))

    locks = [np.zeros(len(r.gt_segments), dtype=np.bool_) for r in results]
    tp = np.zeros(len(pooled), dtype=np.float64)
    for k, (_, index, prediction) in enumerate(pooled):
        tp[k] = match_predictions([prediction], results[index].gt_segments, threshold, locks[index])[0]
    return _ap_from_flags(tp, sum(len(r.gt_segments) for r in results))


def evaluate(
    results: list[EpisodeResult],
    thresholds: tuple[float, ...] | list[float] = DEFAULT_THRESHOLDS,
    micro: bool = False,
) -> EvalResult:
    """
    mAP at each threshold over episodes with ground truth.

    Macro (default): mean of per-episode APs. Micro: one AP per threshold over the
    pooled predictions. Per-episode APs are reported in both modes.

    Raises:
        EvaluationError: no episode has ground truth
    """
    valid = [r for r in results if r.gt_segments]
    skipped = len(results) - len(valid)
    if skipped:
        log.warning(f"{skipped} episode(s) without ground truth excluded from evaluation")
    if not valid:
        raise EvaluationError("No episode with ground truth to evaluate")

    thresholds = [float(t) for t in thresholds]
    per_episode: dict[str, dict[float, float]] = {}
    for r in valid:
        per_episode[r.episode_id] = {
            t: float(episode_ap(r.predictions, r.gt_segments, t) or 0.0) for t in thresholds
        }

    if micro:
        maps = {t: _micro_ap(valid, t) for t in thresholds}
    else:
        maps = {t: float(np.mean([per_episode[r.episode_id][t] for r in valid])) for t in thresholds}
    mean_map = float(np.mean([maps[t] for t in thresholds]))
    log.info(
        f"mAP over {len(valid)} episodes ({'micro' if micro else 'macro'}): "
        + ", ".join(f"{_key(t)}={maps[t]:.4f}" for t in thresholds)
        + f", mean={mean_map:.4f}"
    )
    return EvalResult(thresholds, maps, mean_map, per_episode, micro)


def report(
    result: EvalResult,
    metadata: dict[str, Any],
    out_dir: str | Path,
    sweep: dict[int, EvalResult] | None = None,
) -> Path:
    """
    Write result.json and the static plots into `out_dir`.

    The document holds the result, `metadata` (config echo, seed, checkpoint id)
    and, for a sweep, one result per support count. It contains no timestamps, so
    identical inputs give identical bytes.

    Raises:
        ReportError: the directory cannot be created or written
    """
    out_dir = Path(out_dir)
    doc: dict[str, Any] = {"schema_version": RESULT_SCHEMA_VERSION, **result.to_dict(), "metadata": metadata}
    if sweep:
        doc["sweep"] = [{"num_supports": n, **sweep[n].to_dict()} for n in sorted(sweep)]

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESULT_FILE
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _plot_map_vs_threshold(result, out_dir / "map_vs_threshold.png")
        _plot_ap_histogram(result, out_dir / "ap_histogram.png")
        if sweep:
            _plot_map_vs_supports(sweep, out_dir / "map_vs_supports.png")
    except OSError as e:
        raise ReportError(f"Cannot write report to {out_dir}: {e}") from e
    log.info(f"Report written to {path}")
    return path


def load_result(path: str | Path) -> tuple[EvalResult, dict[str, Any]]:
    """Parse a result document back into (EvalResult, metadata)."""
    path = Path(path)
    if path.is_dir():
        path = path / RESULT_FILE
    data = json.loads(path.read_text())
    if data.get("schema_version") != RESULT_SCHEMA_VERSION:
        raise EvaluationError(f"{path}: unsupported result schema {data.get('schema_version')}")
    return EvalResult.from_dict(data), data.get("metadata", {})


def _plot_map_vs_threshold(result: EvalResult, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(result.thresholds, [result.map[t] for t in result.thresholds], marker="o")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"mAP (mean {result.mean_map:.3f})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_ap_histogram(result: EvalResult, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    theta = result.thresholds[0]
    aps = [aps[theta] for aps in result.per_episode.values()]
    ax.hist(aps, bins=10, range=(0.0, 1.0))
    ax.set_xlabel(f"episode AP @ {_key(theta)}")
    ax.set_ylabel("episodes")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_map_vs_supports(sweep: dict[int, EvalResult], path: Path) -> None:
    counts = sorted(sweep)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    theta = sweep[counts[0]].thresholds[0]
    ax.plot(counts, [sweep[n].map[theta] for n in counts], marker="o", label=f"mAP@{_key(theta)}")
    ax.plot(counts, [sweep[n].mean_map for n in counts], marker="s", label="mean mAP")
    ax.set_xlabel("support videos")
    ax.set_ylabel("mAP")
    ax.set_xticks(counts)
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

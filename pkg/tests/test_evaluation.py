"""Unit tests for detection AP, mAP aggregation and reporting."""

import json
import logging
import random

import numpy as np
import pytest

from commonloc.evaluation import (
    RESULT_FILE,
    EpisodeResult,
    EvaluationError,
    EvalResult,
    ReportError,
    episode_ap,
    evaluate,
    interpolated_prec_rec,
    load_result,
    match_predictions,
    report,
)
from commonloc.models import PredictionSet, ScoredSegment, TemporalSegment
from commonloc.selftest import oracle_ap


def seg(start, end):
    return TemporalSegment(float(start), float(end))


def preds(*items, video_id="q"):
    return PredictionSet(video_id, [ScoredSegment(seg(s, e), score) for s, e, score in items])


def episode(episode_id, gts, *items, num_supports=1):
    return EpisodeResult(episode_id, preds(*items), [seg(s, e) for s, e in gts], num_supports)


@pytest.fixture
def three_episodes():
    """Per-episode APs at 0.5: 1.0, 0.0 and 5/6; the first misses at 0.9."""
    return [
        episode("e1", [(0, 10)], (0, 8.5, 0.9)),
        episode("e2", [(0, 10)], (20, 30, 0.9)),
        episode("e3", [(0, 10), (50, 60)], (0, 10, 0.9), (100, 110, 0.8), (50, 60, 0.7)),
    ]


class TestEpisodeAp:
    """Tests for single-episode AP."""

    def test_single_hit(self):
        assert episode_ap(preds((0, 10, 0.9)), [seg(1, 10)], 0.5) == 1.0

    def test_single_miss(self):
        """tIoU 0.3 is below the threshold."""
        assert episode_ap(preds((0, 3, 0.9)), [seg(0, 10)], 0.5) == 0.0

    def test_hit_miss_hit(self):
        ap = episode_ap(preds((0, 10, 0.9), (100, 110, 0.8), (50, 60, 0.7)), [seg(0, 10), seg(50, 60)], 0.5)
        assert ap == pytest.approx(5 / 6, abs=1e-9)

    def test_matches_brute_force_oracle(self):
        rng = random.Random(5)
        for _ in range(200):
            gts = [seg(s, s + rng.randint(2, 20)) for s in (rng.randint(0, 80) for _ in range(rng.randint(1, 4)))]
            items = [(s, s + rng.randint(2, 20), round(rng.random(), 2)) for s in (rng.randint(0, 80) for _ in range(rng.randint(0, 8)))]
            prediction_set = preds(*items)
            assert episode_ap(prediction_set, gts, 0.5) == pytest.approx(
                oracle_ap(prediction_set.predictions, gts, 0.5), abs=1e-9
            )

    def test_strictly_above_threshold(self):
        """tIoU exactly at the threshold does not count."""
        assert episode_ap(preds((0, 5, 0.9)), [seg(0, 10)], 0.5) == 0.0

    def test_duplicate_detection_is_false_positive(self):
        ap = episode_ap(preds((0, 10, 0.9), (0, 10, 0.8)), [seg(0, 10), seg(50, 60)], 0.5)
        assert ap == pytest.approx(0.5)

    def test_no_ground_truth_excluded(self, caplog):
        with caplog.at_level(logging.WARNING, logger="commonloc.evaluation"):
            assert episode_ap(preds((0, 10, 0.9)), [], 0.5) is None
        assert "no ground truth" in caplog.text

    def test_no_predictions(self):
        assert episode_ap(preds(), [seg(0, 10)], 0.5) == 0.0

    def test_insertion_order_irrelevant(self):
        a = preds((0, 10, 0.5), (2, 12, 0.5))
        b = preds((2, 12, 0.5), (0, 10, 0.5))
        assert episode_ap(a, [seg(0, 10)], 0.7) == episode_ap(b, [seg(0, 10)], 0.7)


class TestMatching:
    """Tests for the greedy matcher."""

    def test_falls_back_to_next_free_gt(self):
        predictions = [ScoredSegment(seg(0, 10), 0.9), ScoredSegment(seg(0, 10.5), 0.8)]
        flags = match_predictions(predictions, [seg(0, 10), seg(0, 12)], 0.5)
        assert flags.tolist() == [1.0, 1.0]

    def test_locked_gts_respected(self):
        locked = np.array([True])
        assert match_predictions([ScoredSegment(seg(0, 10), 0.9)], [seg(0, 10)], 0.5, locked).tolist() == [0.0]

    def test_interpolation_envelope(self):
        assert interpolated_prec_rec([1.0, 0.5, 2 / 3], [0.5, 0.5, 1.0]) == pytest.approx(5 / 6)


class TestEvaluate:
    """Tests for mAP over episodes."""

    def test_all_perfect(self):
        results = [episode(f"e{i}", [(0, 10)], (0, 10, 0.9)) for i in range(4)]
        result = evaluate(results)
        assert all(v == 1.0 for v in result.map.values())
        assert result.mean_map == 1.0

    def test_hand_fixture(self, three_episodes):
        result = evaluate(three_episodes)
        assert result.map[0.5] == pytest.approx((1.0 + 0.0 + 5 / 6) / 3)
        assert result.map[0.9] == pytest.approx((0.0 + 0.0 + 5 / 6) / 3)
        assert result.per_episode["e1"][0.8] == 1.0
        assert result.num_episodes == 3

    def test_map_non_increasing_in_threshold(self, three_episodes):
        result = evaluate(three_episodes)
        values = [result.map[t] for t in result.thresholds]
        assert values == sorted(values, reverse=True)

    def test_mean_over_thresholds(self, three_episodes):
        result = evaluate(three_episodes)
        assert result.mean_map == pytest.approx(sum(result.map.values()) / 5)

    def test_episode_without_gt_skipped(self, three_episodes):
        result = evaluate(three_episodes + [episode("empty", [], (0, 10, 0.9))])
        assert result.num_episodes == 3
        assert "empty" not in result.per_episode

    def test_nothing_to_evaluate(self):
        with pytest.raises(EvaluationError):
            evaluate([episode("empty", [], (0, 10, 0.9))])

    def test_micro_pools_predictions(self):
        results = [
            episode("a", [(0, 10)], (0, 10, 0.9)),
            episode("b", [(0, 10)], (50, 60, 0.8), (0, 10, 0.7)),
        ]
        assert evaluate(results, [0.5]).map[0.5] == pytest.approx(0.75)
        micro = evaluate(results, [0.5], micro=True)
        assert micro.map[0.5] == pytest.approx(5 / 6)
        assert micro.micro

    def test_custom_thresholds(self, three_episodes):
        result = evaluate(three_episodes, [0.3])
        assert list(result.map) == [0.3]


class TestReport:
    """Tests for result documents and plots."""

    def test_writes_document_and_plots(self, three_episodes, isolated_tmp_dir):
        path = report(evaluate(three_episodes), {"seed": 0}, isolated_tmp_dir / "eval")
        assert path.name == RESULT_FILE
        assert (isolated_tmp_dir / "eval" / "map_vs_threshold.png").exists()
        assert (isolated_tmp_dir / "eval" / "ap_histogram.png").exists()
        doc = json.loads(path.read_text())
        assert set(doc["map"]) == {"0.5", "0.6", "0.7", "0.8", "0.9"}
        assert doc["metadata"] == {"seed": 0}

    def test_round_trip(self, three_episodes, isolated_tmp_dir):
        result = evaluate(three_episodes)
        report(result, {"checkpoint_id": "abc"}, isolated_tmp_dir)
        back, metadata = load_result(isolated_tmp_dir)
        assert back == result
        assert metadata == {"checkpoint_id": "abc"}

    def test_identical_inputs_identical_bytes(self, three_episodes, isolated_tmp_dir):
        result = evaluate(three_episodes)
        a = report(result, {"seed": 1}, isolated_tmp_dir / "a").read_bytes()
        b = report(result, {"seed": 1}, isolated_tmp_dir / "b").read_bytes()
        assert a == b

    def test_sweep_series(self, isolated_tmp_dir):
        sweep = {
            n: evaluate([episode(f"e{n}", [(0, 10)], (0, 10, 0.9), num_supports=n)])
            for n in range(1, 7)
        }
        path = report(sweep[6], {}, isolated_tmp_dir, sweep=sweep)
        doc = json.loads(path.read_text())
        assert [row["num_supports"] for row in doc["sweep"]] == [1, 2, 3, 4, 5, 6]
        assert (isolated_tmp_dir / "map_vs_supports.png").exists()

    def test_unwritable_directory(self, three_episodes, isolated_tmp_dir):
        blocker = isolated_tmp_dir / "file"
        blocker.write_text("x")
        with pytest.raises(ReportError):
            report(evaluate(three_episodes), {}, blocker / "eval")

    def test_unknown_schema(self, isolated_tmp_dir):
        (isolated_tmp_dir / RESULT_FILE).write_text('{"schema_version": 7}')
        with pytest.raises(EvaluationError):
            load_result(isolated_tmp_dir)

    def test_from_dict_inverse(self, three_episodes):
        result = evaluate(three_episodes)
        assert EvalResult.from_dict(result.to_dict()) == result

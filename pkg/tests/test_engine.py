"""Tests for training, checkpoints and inference on tiny synthetic episodes."""

import dataclasses
import json
import logging
import math

import numpy as np
import pytest
import torch

from commonloc.circuit_breaker import TrainingDiverged
from commonloc.config import TrainConfig
from commonloc.diffcore import ContainerError
from commonloc.engine import (
    CHECKPOINT_FILE,
    TRAIN_LOG_FILE,
    build_net,
    canonical_supports,
    checkpoint_id,
    episode_losses,
    forward_episode,
    infer,
    infer_long,
    load_checkpoint,
    merge_window_predictions,
    run_episodes,
    scheduled_lr,
    train,
    window_episodes,
)
from commonloc.episodes import SyntheticEpisodeSource
from commonloc.heads import NonFiniteLossError
from commonloc.models import ContractViolation, Phase, PredictionSet, ScoredSegment, TemporalSegment
from commonloc.temporal import tiou


@pytest.fixture
def trained(tiny_cfg, isolated_tmp_dir):
    return train(tiny_cfg, SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN), isolated_tmp_dir)


def reversed_supports(data):
    episode = dataclasses.replace(data.episode, supports=tuple(reversed(data.episode.supports)))
    return dataclasses.replace(data, episode=episode, supports=list(reversed(data.supports)))


class TestSchedule:
    """Tests for the step learning-rate schedule."""

    def test_step_decay(self):
        cfg = TrainConfig(lr=1e-3, lr_after_decay=1e-4, decay_iteration=1250)
        assert scheduled_lr(cfg, 0) == 1e-3
        assert scheduled_lr(cfg, 1249) == 1e-3
        assert scheduled_lr(cfg, 1250) == 1e-4
        assert scheduled_lr(cfg, 1999) == 1e-4


class TestForward:
    """Tests for one pass over an episode."""

    def test_shapes(self, tiny_cfg):
        net = build_net(tiny_cfg)
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN).get(0)
        fwd = forward_episode(net, tiny_cfg, data, Phase.TRAIN)
        assert len(fwd.anchors) == 32 * 4
        assert fwd.batch.size == tiny_cfg.proposals.train_count
        assert fwd.head.logits.shape == (tiny_cfg.proposals.train_count,)
        assert fwd.refined.shape == (tiny_cfg.proposals.train_count, 2)
        assert fwd.refined.min() >= 0.0
        assert fwd.refined.max() <= data.num_frames

    def test_row_stride_must_match_anchors(self, tiny_cfg):
        data = dataclasses.replace(SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN).get(0), row_stride=4)
        with pytest.raises(ContractViolation, match="frames per step"):
            forward_episode(build_net(tiny_cfg), tiny_cfg, data, Phase.TRAIN)

    def test_losses_backpropagate(self, tiny_cfg):
        net = build_net(tiny_cfg)
        terms = episode_losses(net, tiny_cfg, SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN).get(1))
        assert math.isfinite(float(terms["total"]))
        terms["total"].backward()
        assert net.head.cls.weight.grad is not None
        assert net.proposal.cls.weight.grad is not None
        assert net.pam.k0.c1.weight.grad is not None

    def test_disabled_modules_absent(self, tiny_cfg):
        tiny_cfg.model.use_mem = False
        tiny_cfg.model.use_pam = False
        net = build_net(tiny_cfg)
        assert net.mem is None and net.pam is None
        names = {n.split(".")[0] for n, _ in net.named_parameters()}
        assert names == {"proposal", "head"}


class TestTrain:
    """Tests for the episodic training loop."""

    def test_writes_log_and_checkpoint(self, trained, tiny_cfg, isolated_tmp_dir):
        assert trained.checkpoint == isolated_tmp_dir / CHECKPOINT_FILE
        assert trained.checkpoint.exists()
        records = [json.loads(line) for line in (isolated_tmp_dir / TRAIN_LOG_FILE).read_text().splitlines()]
        assert [r["iteration"] for r in records] == list(range(tiny_cfg.train.iterations))
        assert {"total_loss", "cls_loss", "reg_loss", "lr", "agnostic", "conditioned"} <= set(records[0])
        assert len(trained.losses) == tiny_cfg.train.iterations

    def test_learning_rate_decays(self, trained, isolated_tmp_dir):
        records = [json.loads(line) for line in (isolated_tmp_dir / TRAIN_LOG_FILE).read_text().splitlines()]
        assert [r["lr"] for r in records] == pytest.approx([1e-3] * 4 + [1e-4] * 2)

    def test_same_seed_same_losses(self, tiny_cfg, isolated_tmp_dir):
        source = SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN)
        a = train(tiny_cfg, source, isolated_tmp_dir / "a")
        b = train(tiny_cfg, source, isolated_tmp_dir / "b")
        assert a.losses == b.losses
        assert checkpoint_id(a.checkpoint) == checkpoint_id(b.checkpoint)

    def test_on_iteration_callback(self, tiny_cfg, isolated_tmp_dir):
        seen = []
        train(tiny_cfg, SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN), isolated_tmp_dir, on_iteration=seen.append)
        assert len(seen) == tiny_cfg.train.iterations

    def test_non_finite_loss_diverges(self, tiny_cfg, isolated_tmp_dir, monkeypatch):
        def exploding(*args, **kwargs):
            raise NonFiniteLossError("Loss is not finite: cls=nan, reg=0.0")

        monkeypatch.setattr("commonloc.engine.episode_losses", exploding)
        with pytest.raises(TrainingDiverged) as exc:
            train(tiny_cfg, SyntheticEpisodeSource(tiny_cfg, Phase.TRAIN), isolated_tmp_dir)
        assert exc.value.snapshot["iteration"] == 0


class TestCheckpoint:
    """Tests for checkpoint persistence."""

    def test_round_trip_predictions(self, trained, tiny_cfg):
        loaded = load_checkpoint(trained.checkpoint, tiny_cfg)
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(0)
        assert infer(trained.net, tiny_cfg, data) == infer(loaded.net, loaded.cfg, data)
        assert loaded.iteration == tiny_cfg.train.iterations

    def test_parameters_identical(self, trained):
        loaded = load_checkpoint(trained.checkpoint)
        for (name, a), (_, b) in zip(trained.net.state_dict().items(), loaded.net.state_dict().items(), strict=True):
            assert torch.equal(a, b), name

    def test_checkpoint_architecture_wins(self, trained, tiny_cfg, caplog):
        other = dataclasses.replace(tiny_cfg, model=dataclasses.replace(tiny_cfg.model, channels=32))
        with caplog.at_level(logging.WARNING, logger="commonloc.engine"):
            loaded = load_checkpoint(trained.checkpoint, other)
        assert loaded.cfg.model.channels == 16
        assert "differ from the checkpoint" in caplog.text

    def test_checkpoint_id_is_short_hash(self, trained):
        cid = checkpoint_id(trained.checkpoint)
        assert len(cid) == 16
        int(cid, 16)

    def test_truncated_checkpoint(self, trained):
        raw = trained.checkpoint.read_bytes()
        trained.checkpoint.write_bytes(raw[:-100])
        with pytest.raises(ContainerError):
            load_checkpoint(trained.checkpoint)


class TestInference:
    """Tests for single-window and sliding-window inference."""

    def test_deterministic(self, trained, tiny_cfg):
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(1)
        assert infer(trained.net, tiny_cfg, data) == infer(trained.net, tiny_cfg, data)

    def test_support_order_invariant(self, trained, tiny_cfg):
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(2)
        assert infer(trained.net, tiny_cfg, data) == infer(trained.net, tiny_cfg, reversed_supports(data))

    def test_canonical_order_is_stable(self, tiny_cfg):
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(0)
        a = canonical_supports(data)
        b = canonical_supports(reversed_supports(data))
        assert a.episode.supports == b.episode.supports

    def test_predictions_sorted_and_suppressed(self, trained, tiny_cfg):
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(0)
        preds = infer(trained.net, tiny_cfg, data).predictions
        assert preds
        scores = [p.score for p in preds]
        assert scores == sorted(scores, reverse=True)
        threshold = tiny_cfg.final_nms_threshold()
        for i, a in enumerate(preds):
            assert 0.0 <= a.segment.start < a.segment.end <= data.num_frames
            for b in preds[i + 1:]:
                assert tiou(a.segment, b.segment) <= threshold

    def test_long_query_requires_windows(self, trained, tiny_cfg):
        tiny_cfg.synthetic.num_frames = 1024
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(0)
        with pytest.raises(ContractViolation, match="infer_long"):
            infer(trained.net, tiny_cfg, data)
        preds = infer_long(trained.net, tiny_cfg, data)
        assert preds.video_id == data.episode.query.video_id
        assert all(p.segment.end <= 1024 for p in preds.predictions)

    def test_short_query_takes_single_window(self, trained, tiny_cfg):
        data = SyntheticEpisodeSource(tiny_cfg, Phase.TEST).get(3)
        assert infer_long(trained.net, tiny_cfg, data) == infer(trained.net, tiny_cfg, data)

    def test_run_episodes(self, trained, tiny_cfg):
        source = SyntheticEpisodeSource(tiny_cfg, Phase.TEST, num_supports=2)
        results = run_episodes(trained.net, tiny_cfg, source, 3)
        assert len(results) == 3
        assert all(r.num_supports == 2 for r in results)
        assert all(r.gt_segments for r in results)


def marked_query(cfg, first_row, last_row, num_frames=1024, frame_offset=0.0):
    """Long episode whose only non-zero rows (channel 0) are first_row..last_row."""
    cfg.synthetic.num_frames = 1024
    data = SyntheticEpisodeSource(cfg, Phase.TEST).get(0)
    rows = np.zeros_like(data.query)
    rows[first_row : last_row + 1, 0] = 1.0
    query = dataclasses.replace(data.episode.query, num_frames=num_frames, instances=())
    episode = dataclasses.replace(data.episode, query=query, gt_segments=())
    return dataclasses.replace(data, episode=episode, query=rows, frame_offset=frame_offset)


def marker_detector(cfg, calls):
    """Stand-in for single-window inference: reports the marked rows when they sit inside the window."""

    def detect(net, run_cfg, sub):
        assert sub.num_frames <= cfg.eval.max_window
        calls.append(sub)
        marked = np.flatnonzero(sub.query[:, 0] > 0.5)
        video_id = sub.episode.query.video_id
        if len(marked) == 0 or marked[0] == 0 or marked[-1] >= len(sub.query) - 2:
            return PredictionSet(video_id)
        rs = sub.row_stride
        start = marked[0] * rs - sub.frame_offset
        end = (marked[-1] + 1) * rs - sub.frame_offset
        if start < 0 or end > sub.num_frames:
            return PredictionSet(video_id)
        return PredictionSet(video_id, [ScoredSegment(TemporalSegment(float(start), float(end)), 0.9)])

    return detect


class TestWindows:
    """Tests for cutting long queries into windows and merging their predictions."""

    def test_sub_episodes_follow_windows(self, tiny_cfg):
        data = marked_query(tiny_cfg, 60, 69)
        pieces = window_episodes(tiny_cfg, data)
        assert len(pieces) > 1
        for window, sub in pieces:
            assert sub.num_frames == window.length
            assert sub.frame_offset == 0.0
            lo = int(window.start) // 8
            np.testing.assert_array_equal(sub.query, data.query[lo : lo + int(window.length) // 8])
            assert not sub.episode.gt_segments

    def test_window_predictions_shift_to_query_frames(self, tiny_cfg, monkeypatch):
        """An action seen by several windows comes back once, at its place in the query."""
        data = marked_query(tiny_cfg, 60, 69)
        calls = []
        monkeypatch.setattr("commonloc.engine.infer", marker_detector(tiny_cfg, calls))
        preds = infer_long(None, tiny_cfg, data).predictions
        assert len(calls) == len(window_episodes(tiny_cfg, data))
        assert len(preds) == 1
        assert preds[0].segment.as_list() == [480.0, 560.0]
        assert preds[0].score == pytest.approx(0.9)

    def test_rows_starting_before_query(self, tiny_cfg, monkeypatch):
        """With rows starting 3 frames early, predictions land 3 frames earlier in the query."""
        data = marked_query(tiny_cfg, 60, 69, num_frames=1021, frame_offset=3.0)
        monkeypatch.setattr("commonloc.engine.infer", marker_detector(tiny_cfg, []))
        preds = infer_long(None, tiny_cfg, data).predictions
        assert len(preds) == 1
        assert preds[0].segment.start == pytest.approx(477.0)
        assert preds[0].segment.end == pytest.approx(557.0)

    def test_cut_predictions_down_weighted(self, tiny_cfg):
        whole = PredictionSet("v", [ScoredSegment(TemporalSegment(100.0, 150.0), 0.6)])
        cut = PredictionSet("v", [ScoredSegment(TemporalSegment(0.0, 40.0), 0.8)])
        merged = merge_window_predictions(
            "v",
            [(TemporalSegment(0.0, 256.0), whole), (TemporalSegment(256.0, 512.0), cut)],
            1024,
            tiny_cfg,
            edge_tolerance=8,
        ).predictions
        assert [p.segment.as_list() for p in merged] == [[100.0, 150.0], [256.0, 296.0]]
        assert merged[1].score == pytest.approx(0.8 * tiny_cfg.eval.window_edge_weight)

    def test_query_edges_are_not_cuts(self, tiny_cfg):
        first = PredictionSet("v", [ScoredSegment(TemporalSegment(0.0, 40.0), 0.8)])
        last = PredictionSet("v", [ScoredSegment(TemporalSegment(200.0, 256.0), 0.7)])
        merged = merge_window_predictions(
            "v", [(TemporalSegment(0.0, 256.0), first), (TemporalSegment(768.0, 1024.0), last)], 1024, tiny_cfg
        ).predictions
        assert [p.score for p in merged] == [0.8, 0.7]

    def test_nothing_found(self, tiny_cfg):
        merged = merge_window_predictions("v", [(TemporalSegment(0.0, 256.0), PredictionSet("v"))], 1024, tiny_cfg)
        assert merged == PredictionSet("v")

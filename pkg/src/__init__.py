"""
commonloc - few-shot common action localization.

Given N trimmed support videos that share an unnamed action and one untrimmed
query video, predict the temporal segments of that action in the query.

Features:
- Class-agnostic anchor proposals with score filter, NMS and fixed per-phase counts
- Mutual enhancement, progressive alignment and pairwise matching of supports and proposals
- Episodic training with a joint proposal/classification loss
- Multi-scale sliding-window inference for long queries
- Episode-level AP/mAP evaluation with reports and few-shot sweeps
- Brute-force oracle and finite-difference self tests

Usage (programmatic):
    from commonloc import RunConfig, SyntheticEpisodeSource, Phase, train, infer

    cfg = RunConfig()
    result = train(cfg, SyntheticEpisodeSource(cfg, Phase.TRAIN), "runs/demo")
    predictions = infer(result.net, cfg, SyntheticEpisodeSource(cfg, Phase.TEST).get(0))

Usage (CLI):
    commonloc train --synthetic --iters 2000
    commonloc eval --synthetic
    commonloc sweep --synthetic --max-supports 6
    commonloc selftest
"""

from .circuit_breaker import CircuitBreaker, CircuitState, IterationMetrics, TrainingDiverged, create_circuit_breaker
from .config import RunConfig, load_config
from .engine import CommonLocNet, infer, infer_long, load_checkpoint, run_episodes, train
from .episodes import EpisodeData, FeatureEpisodeSource, SyntheticEpisodeSource, build_source
from .evaluation import EpisodeResult, EvalResult, episode_ap, evaluate, load_result, report
from .models import (
    AnnotatedVideo,
    ContractViolation,
    Episode,
    Phase,
    PredictionSet,
    ScoredSegment,
    TemporalSegment,
)
from .runner import run_command
from .temporal import nms, tiou

__all__ = [
    # Models
    "TemporalSegment",
    "ScoredSegment",
    "AnnotatedVideo",
    "Episode",
    "Phase",
    "PredictionSet",
    "ContractViolation",
    # Config
    "RunConfig",
    "load_config",
    # Temporal
    "tiou",
    "nms",
    # Episodes
    "EpisodeData",
    "SyntheticEpisodeSource",
    "FeatureEpisodeSource",
    "build_source",
    # Engine
    "CommonLocNet",
    "train",
    "infer",
    "infer_long",
    "load_checkpoint",
    "run_episodes",
    # Evaluation
    "EpisodeResult",
    "EvalResult",
    "episode_ap",
    "evaluate",
    "report",
    "load_result",
    # Circuit Breaker
    "CircuitBreaker",
    "CircuitState",
    "IterationMetrics",
    "TrainingDiverged",
    "create_circuit_breaker",
    # CLI
    "run_command",
]

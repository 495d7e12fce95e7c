"""
Configuration settings for commonloc.

Environment-level settings come from `.env` / the process environment; everything a
run depends on lives in `RunConfig`, which is echoed into every checkpoint and result
document so that a run can be reproduced from its artifacts.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

# Load environment variables from .env file
env_file = Path(__file__).parent.parent / ".env"
if env_file.exists():
    load_dotenv(env_file)

# Default output directory for every subcommand
OUTPUT_DIR = Path(os.getenv("COMMONLOC_OUTPUT_DIR", "./runs"))

# Logging
LOG_LEVEL = os.getenv("COMMONLOC_LOG_LEVEL", "INFO").upper()

# None = leave torch's default
_threads = os.getenv("COMMONLOC_NUM_THREADS")
NUM_THREADS: int | None = int(_threads) if _threads else None

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for unknown keys or values that cannot be coerced."""
    pass


@dataclass
class TrainConfig:
    """Optimizer schedule and episode sampling for training."""
    lr: float = 1e-3
    lr_after_decay: float = 1e-4
    decay_iteration: int = 1250
    iterations: int = 2000
    batch_size: int = 1
    seed: int = 0
    num_supports: int = 5
    log_every: int = 100
    # Classification loss is divided by batch size; True divides by proposal count instead
    cls_mean_over_proposals: bool = False
    plateau_windows: int = 5
    spike_ratio: float = 50.0


@dataclass
class ModelConfig:
    """Feature widths and alignment structure."""
    channels: int = 512
    parts: int = 4
    attention_dim: int = 0  # 0 = channels // 2
    value_dim: int = 0  # 0 = channels // 2
    reduction: int = 4
    depth: int = 3
    scale_attention: bool = False
    use_mem: bool = True
    use_pam: bool = True
    use_pmm: bool = True
    backbone: str = "passthrough"  # passthrough | encoder | precomputed
    input_channels: int = 768
    max_log_ratio: float = 4.0


@dataclass
class AnchorConfig:
    scales: tuple[int, ...] = (32, 64, 128, 256, 512)
    stride: int = 8


@dataclass
class ProposalConfig:
    """Proposal selection policy and target-assignment thresholds."""
    score_threshold: float = 0.7
    nms_threshold: float = 0.7
    min_keep: int = 16
    train_count: int = 128
    eval_count: int = 300
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    cond_pos_iou: float = 0.5
    cond_neg_iou: float = 0.3


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | features
    annotations: str = ""
    annotation_format: str = "activitynet"  # activitynet | thumos
    default_fps: float = 0.0  # 0 = every record must carry its own fps
    split_mode: str = "fixed"  # fixed | random
    split_seed: int = 0
    variant: str = "common"  # common | multi
    max_frames: int = 768
    manifest: str = ""
    features_dir: str = ""


@dataclass
class SyntheticConfig:
    """Desk-scale episode generator."""
    num_frames: int = 768
    num_gt: int = 1
    noise_std: float = 0.25
    num_distractors: int = 0
    gt_steps_min: int = 8
    gt_steps_max: int = 32
    support_steps_min: int = 8
    support_steps_max: int = 16
    frame_level: bool = False
    eval_seed: int = 0


@dataclass
class EvalConfig:
    theta: float = 0.5
    thresholds: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    final_nms: str = "relative"  # relative | absolute
    final_nms_absolute: float = 0.1
    final_nms_offset: float = 0.1
    final_nms_floor: float = 0.1
    episodes: int = 50
    micro: bool = False
    noisy_count: int = 0
    noisy_same_class: bool = False
    image_support: bool = False
    window_lengths: tuple[int, ...] = (256, 512, 768)
    window_overlap: float = 0.75
    max_window: int = 768
    fuse_proposal_score: bool = True
    window_edge_weight: float = 0.5


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def final_nms_threshold(self) -> float:
        """Threshold of the last NMS pass at inference."""
        if self.eval.final_nms == "absolute":
            return self.eval.final_nms_absolute
        return max(self.eval.final_nms_floor, self.eval.theta - self.eval.final_nms_offset)


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _field_index() -> dict[str, list[str]]:
    """Bare field name -> sections that define it."""
    index: dict[str, list[str]] = {}
    defaults = RunConfig()
    for section in SECTIONS:
        for f in dataclasses.fields(getattr(defaults, section)):
            index.setdefault(f.name, []).append(section)
    return index


def _resolve_key(key: str) -> tuple[str, str]:
    index = _field_index()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or section not in index.get(name, []):
            raise ConfigError(f"Unknown config key: {key}")
        return section, name
    sections = index.get(key)
    if not sections:
        raise ConfigError(f"Unknown config key: {key}")
    if len(sections) > 1:
        raise ConfigError(
            f"Ambiguous config key '{key}': use one of "
            + ", ".join(f"{s}.{key}" for s in sections)
        )
    return sections[0], key


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Coerce `value` to the type of `default`."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = value
            if isinstance(value, str):
                text = value.strip()
                items = json.loads(text) if text.startswith("[") else text.split(",")
            elem = type(default[0]) if default else float
            return tuple(elem(float(v)) if elem is int else elem(v) for v in items)
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"Invalid value for {key}: {value!r}") from e


def _apply(cfg: RunConfig, key: str, value: Any) -> None:
    section, name = _resolve_key(key)
    target = getattr(cfg, section)
    setattr(target, name, _coerce(value, getattr(target, name), f"{section}.{name}"))


def _flatten(doc: dict[str, Any]) -> list[tuple[str, Any]]:
    items: list[tuple[str, Any]] = []
    for key, value in doc.items():
        if key == "schema_version":
            continue
        if key in SECTIONS and isinstance(value, dict):
            items.extend((f"{key}.{k}", v) for k, v in value.items())
        else:
            items.append((key, value))
    return items


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | list[str] | None = None,
) -> RunConfig:
    """
    Build a RunConfig from defaults, then a JSON document, then overrides.

    Keys are dotted (`train.lr`) or bare when the bare name is unique across
    sections (`lr`). Overrides may be a mapping or a list of `key=value` strings.

    Raises:
        ConfigError: unknown or ambiguous key, uncoercible value, unreadable file
    """
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"Config document {path} must be an object")
        for key, value in _flatten(doc):
            _apply(cfg, key, value)

    if isinstance(overrides, list):
        pairs: list[tuple[str, Any]] = []
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"Override must be key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    else:
        pairs = list((overrides or {}).items())
    for key, value in pairs:
        _apply(cfg, key, value)

    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Cross-field checks that single-field coercion cannot catch."""
    t, m, a = cfg.train, cfg.model, cfg.anchors
    if t.iterations < 0 or t.decay_iteration < 0:
        raise ConfigError("train.iterations and train.decay_iteration must be >= 0")
    if m.channels % m.reduction:
        raise ConfigError(f"model.channels ({m.channels}) must be divisible by model.reduction ({m.reduction})")
    if m.depth < 1 or m.parts < 1:
        raise ConfigError("model.depth and model.parts must be >= 1")
    if m.backbone not in ("passthrough", "encoder", "precomputed"):
        raise ConfigError(f"Unknown model.backbone: {m.backbone}")
    if not a.scales or list(a.scales) != sorted(a.scales) or a.scales[0] <= 0 or a.stride < 1:
        raise ConfigError("anchors.scales must be positive ascending and anchors.stride >= 1")
    if cfg.eval.final_nms not in ("relative", "absolute"):
        raise ConfigError(f"Unknown eval.final_nms: {cfg.eval.final_nms}")
    if not 0.0 <= cfg.eval.window_edge_weight <= 1.0:
        raise ConfigError(f"eval.window_edge_weight must lie in [0, 1], got {cfg.eval.window_edge_weight}")
    if cfg.data.variant not in ("common", "multi"):
        raise ConfigError(f"Unknown data.variant: {cfg.data.variant}")
    if cfg.synthetic.frame_level and m.backbone != "encoder":
        raise ConfigError("synthetic.frame_level needs model.backbone=encoder")


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    """Config echo stored in checkpoints and result documents."""
    doc: dict[str, Any] = {"schema_version": CONFIG_SCHEMA_VERSION}
    for section in SECTIONS:
        values = dataclasses.asdict(getattr(cfg, section))
        doc[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}
    return doc


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    """Rebuild a RunConfig from its echo."""
    cfg = RunConfig()
    for key, value in _flatten(doc):
        _apply(cfg, key, value)
    validate_config(cfg)
    return cfg


def full_schedule(cfg: RunConfig) -> RunConfig:
    """Copy of `cfg` with the full-scale optimizer schedule."""
    full = config_from_dict(config_to_dict(cfg))
    full.train.lr = 1e-5
    full.train.lr_after_decay = 1e-6
    full.train.decay_iteration = 25_000
    full.train.iterations = 40_000
    return full


def resolved_dims(cfg: ModelConfig) -> tuple[int, int]:
    """(attention width d, value width d_v) after defaulting to channels // 2."""
    d = cfg.attention_dim or cfg.channels // 2
    d_v = cfg.value_dim or cfg.channels // 2
    return d, d_v

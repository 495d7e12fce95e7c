"""
Backbone providers and support-video encoding.

A provider maps per-row input features (frames, or synthetic feature steps) to a
(num_steps x C) map. The same provider instance encodes query and support videos,
so backbone weights are shared between the two.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
import torch
from torch import Tensor, nn

from .diffcore import CONTAINER_VERSION, ContainerError, read_header
from .models import ContractViolation

FEATURE_FORMAT = "commonloc-features"
FEATURE_SUFFIX = ".feat"

log = logging.getLogger("commonloc.features")


class FeatureShapeError(ValueError):
    """Feature width does not match the run configuration."""

    def __init__(self, what: str, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"{what}: expected {expected} channels, found {found}")


@dataclass(frozen=True)
class FrameFeatures:
    """A (num_steps x C) feature map; each step covers `stride` frames."""
    video_id: str
    values: npt.NDArray[np.float32]
    stride: int
    num_frames: int

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ContractViolation(f"{self.video_id}: features must be (num_steps >= 1, C)")

    @property
    def num_steps(self) -> int:
        return int(self.values.shape[0])

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])


def save_features(path: str | Path, features: FrameFeatures) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FEATURE_FORMAT,
        "version": CONTAINER_VERSION,
        "video_id": features.video_id,
        "num_steps": features.num_steps,
        "channels": features.channels,
        "stride": features.stride,
        "num_frames": features.num_frames,
    }
    with path.open("wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(np.ascontiguousarray(features.values, dtype="<f4").tobytes())
    return path


def load_precomputed(path: str | Path, channels: int | None = None) -> FrameFeatures:
    """
    Load a feature container verbatim.

    Raises:
        ContainerError: bad header or truncated payload
        FeatureShapeError: `channels` given and the file disagrees
    """
    raw = Path(path).read_bytes()
    header, offset = read_header(raw, path, FEATURE_FORMAT)
    try:
        num_steps, width = int(header["num_steps"]), int(header["channels"])
        stride, num_frames = int(header["stride"]), int(header["num_frames"])
    except (KeyError, TypeError, ValueError) as e:
        raise ContainerError(f"{path}: incomplete feature header") from e
    if channels is not None and width != channels:
        raise FeatureShapeError(str(path), channels, width)
    expected = 4 * num_steps * width
    if len(raw) - offset != expected:
        raise ContainerError(f"{path}: payload has {len(raw) - offset} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float32).reshape(num_steps, width)
    return FrameFeatures(str(header["video_id"]), values, stride, num_frames)


class SyntheticPassthrough(nn.Module):
    """Identity provider for features that are already at step level."""

    downsample = 1

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise FeatureShapeError("passthrough input", self.channels, int(x.shape[-1]))
        return x


class PrecomputedProvider(SyntheticPassthrough):
    """Identity provider for rows read from feature containers (`load_precomputed`)."""


class TemporalEncoder(nn.Module):
    """
    Small trainable stand-in for a 3D-conv backbone.

    Three stride-2 temporal convolutions take (num_frames x in_channels) to
    (ceil(num_frames / 8) x channels).
    """

    downsample = 8

    def __init__(self, in_channels: int, channels: int, layers: int = 3):
        super().__init__()
        self.in_channels = in_channels
        widths = [in_channels] + [channels] * layers
        self.convs = nn.ModuleList(
            nn.Conv1d(widths[i], widths[i + 1], kernel_size=3, stride=2, padding=1)
            for i in range(layers)
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise FeatureShapeError("encoder input", self.in_channels, int(x.shape[-1]))
        h = x.transpose(0, 1).unsqueeze(0)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = torch.relu(h)
        return h.squeeze(0).transpose(0, 1)


def encode_query(provider: nn.Module, frames: Tensor) -> Tensor:
    """Feature map of a query video: (num_rows x in) -> (num_steps x C)."""
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ContractViolation(f"encode_query: expected non-empty (rows, channels), got {tuple(frames.shape)}")
    minimum = getattr(provider, "downsample", 1)
    if frames.shape[0] < minimum:
        raise ContractViolation(f"encode_query: need at least {minimum} rows, got {frames.shape[0]}")
    out: Tensor = provider(frames)
    return out


def split_parts(num_rows: int, parts: int) -> list[tuple[int, int]]:
    """
    Row ranges of `parts` contiguous parts; earlier parts take the remainder (10 -> 3/3/2/2).

    With fewer rows than parts, rows are repeated so that every part has one.
    """
    if num_rows < 1:
        raise ContractViolation("Cannot split an empty support video")
    if num_rows < parts:
        log.debug(f"Support has {num_rows} rows for {parts} parts; duplicating rows")
        return [(r, r + 1) for r in (i * num_rows // parts for i in range(parts))]
    bounds = np.array_split(np.arange(num_rows), parts)
    return [(int(b[0]), int(b[-1]) + 1) for b in bounds]


def encode_support(provider: nn.Module, frames: Tensor, parts: int) -> Tensor:
    """Encode each of `parts` temporal parts and mean-pool it: -> (parts x C)."""
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ContractViolation(f"encode_support: expected non-empty (rows, channels), got {tuple(frames.shape)}")
    pooled = [provider(frames[lo:hi]).mean(dim=0) for lo, hi in split_parts(int(frames.shape[0]), parts)]
    return torch.stack(pooled, dim=0)


def inflate_image_support(provider: nn.Module, image: Tensor, parts: int) -> Tensor:
    """Treat a single frame (or feature vector) as a static video and encode it."""
    frame = image.reshape(1, -1)
    rows_per_part = getattr(provider, "downsample", 1)
    static = frame.expand(parts * rows_per_part, frame.shape[1])
    return encode_support(provider, static, parts)


def build_provider(backbone: str, channels: int, input_channels: int) -> nn.Module:
    if backbone == "encoder":
        return TemporalEncoder(input_channels, channels)
    if backbone == "precomputed":
        return PrecomputedProvider(channels)
    return SyntheticPassthrough(channels)

"""
Differentiable primitives and the parameter container.

Every trainable map in commonloc is a `Linear` (an `nn.Linear` that reports shape
errors as ContractViolation). Gradients come from torch autograd; `gradcheck`
compares them against central finite differences so the composed modules can be
verified in 64-bit mode. Checkpoints use a small self-describing container: one
JSON header line followed by raw float32 payloads.
"""

import json
import logging
import math
from collections.abc import Callable, Sequence
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .models import ContractViolation

# 64-bit for verification, 32-bit for training
VERIFY_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32

CONTAINER_FORMAT = "commonloc-tensors"
CONTAINER_VERSION = 1

log = logging.getLogger("commonloc.diffcore")


class ContainerError(ValueError):
    """Malformed, truncated or incompatible tensor/feature container."""
    pass


class GradcheckError(ArithmeticError):
    """The checked function produced a non-finite value."""
    pass


class Activation(Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the trailing axis; `weight` is (out_dim, in_dim)."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractViolation(
            f"linear: input trailing dim {x.shape[-1]} != in_dim {weight.shape[1]}"
        )
    return F.linear(x, weight, bias)


class Linear(nn.Linear):
    """nn.Linear with contract-checked input width."""

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis (max-subtracted internally)."""
    return torch.softmax(x, dim=-1)


def elementwise(x: Tensor, kind: Activation | str) -> Tensor:
    kind = Activation(kind)
    if kind is Activation.RELU:
        return torch.relu(x)
    return torch.sigmoid(x)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """
    Compare autograd gradients of scalar `fn()` with central finite differences.

    `params` are leaf tensors that `fn` reads; they are perturbed in place one entry
    at a time and restored. Returns the maximum over all entries of
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    Raises:
        ContractViolation: a parameter is not float64
        GradcheckError: fn evaluates to a non-finite value
    """
    for p in params:
        if p.dtype != VERIFY_DTYPE:
            raise ContractViolation(f"gradcheck needs float64 parameters, got {p.dtype}")

    def evaluate() -> float:
        value = float(fn().item())
        if not math.isfinite(value):
            raise GradcheckError(f"gradcheck: function evaluated to {value}")
        return value

    out = fn()
    if out.numel() != 1:
        raise ContractViolation(f"gradcheck needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise GradcheckError(f"gradcheck: function evaluated to {out.item()}")
    grads = torch.autograd.grad(out, list(params), allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads, strict=True):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            flat_grad = analytic.reshape(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                right = evaluate()
                flat[i] = old - eps
                left = evaluate()
                flat[i] = old
                numeric = (right - left) / (2.0 * eps)
                a = float(flat_grad[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_tensors(path: str | Path, tensors: dict[str, Tensor], meta: dict[str, Any] | None = None) -> Path:
    """
    Write named tensors to the container format.

    Header: {"format", "version", "tensors": [{"name", "shape"}], "meta"} on one line,
    then each tensor as row-major little-endian float32 in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CONTAINER_FORMAT,
        "version": CONTAINER_VERSION,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors.items()],
        "meta": meta or {},
    }
    with path.open("wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for t in tensors.values():
            f.write(t.detach().cpu().numpy().astype("<f4").tobytes(order="C"))
    return path


def read_header(raw: bytes, path: str | Path, expected_format: str) -> tuple[dict[str, Any], int]:
    """Parse the JSON header line; returns (header, payload offset)."""
    newline = raw.find(b"\n")
    if newline < 0:
        raise ContainerError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline])
    except json.JSONDecodeError as e:
        raise ContainerError(f"{path}: unreadable header: {e.msg}") from e
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise ContainerError(f"{path}: not a {expected_format} container")
    if header.get("version") != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported version {header.get('version')}")
    return header, newline + 1


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    """Read a container written by `save_tensors`; returns (tensors, meta)."""
    raw = Path(path).read_bytes()
    header, offset = read_header(raw, path, CONTAINER_FORMAT)

    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        count = math.prod(shape)
        end = offset + 4 * count
        if end > len(raw):
            raise ContainerError(f"{path}: truncated payload for {entry['name']}")
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = torch.from_numpy(values.astype(np.float32).reshape(shape))
        offset = end
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return tensors, dict(header.get("meta", {}))

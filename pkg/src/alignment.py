"""
Support/query alignment.

The basic block is a residual cross-attention unit: queries from the first input
attend over positions of the second,

    out = c1(softmax_rows(c2(I1) @ c3(I2).T) @ c4(I2)) + I1

Mutual enhancement runs two such blocks in opposite directions. Progressive
alignment applies `depth` blocks in sequence, each attending from the running
proposal representation to a residual-recalibrated support representation.
Pairwise matching then weights every proposal by its cosine similarity and
distance to each support's temporally pooled representation, and `fuse` scales
the aligned proposals by the support-averaged weight.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import ConfigError
from .diffcore import Activation, Linear, elementwise, softmax_rows
from .models import ContractViolation

log = logging.getLogger("commonloc.alignment")


class BasicBlock(nn.Module):
    """Residual cross-attention from I1 (A x C) over I2 (B x C)."""

    def __init__(self, channels: int, attention_dim: int, value_dim: int, scale: bool = False):
        super().__init__()
        self.channels = channels
        self.c2 = Linear(channels, attention_dim)
        self.c3 = Linear(channels, attention_dim)
        self.c4 = Linear(channels, value_dim)
        self.c1 = Linear(value_dim, channels)
        self.scale = 1.0 / math.sqrt(attention_dim) if scale else 1.0

    def attention(self, i1: Tensor, i2: Tensor) -> Tensor:
        """(A x B) weights, each row a distribution over the positions of I2."""
        logits = self.c2(i1) @ self.c3(i2).transpose(0, 1)
        return softmax_rows(logits * self.scale)

    def forward(self, i1: Tensor, i2: Tensor) -> Tensor:
        if i1.ndim != 2 or i2.ndim != 2 or i1.shape[1] != self.channels or i2.shape[1] != self.channels:
            raise ContractViolation(
                f"basic_block: expected (A x {self.channels}) and (B x {self.channels}), "
                f"got {tuple(i1.shape)} and {tuple(i2.shape)}"
            )
        out: Tensor = self.c1(self.attention(i1, i2) @ self.c4(i2)) + i1
        return out


def basic_block(i1: Tensor, i2: Tensor, block: BasicBlock) -> Tensor:
    out: Tensor = block(i1, i2)
    return out


class MutualEnhancement(nn.Module):
    """Two independent streams: query from supports (sq) and supports from query (qs)."""

    def __init__(self, channels: int, attention_dim: int, value_dim: int, scale: bool = False):
        super().__init__()
        self.sq = BasicBlock(channels, attention_dim, value_dim, scale)
        self.qs = BasicBlock(channels, attention_dim, value_dim, scale)

    def forward(self, f_q: Tensor, f_s_flat: Tensor) -> tuple[Tensor, Tensor]:
        return self.sq(f_q, f_s_flat), self.qs(f_s_flat, f_q)


def mutual_enhance(f_q: Tensor, f_s_flat: Tensor, mem: MutualEnhancement) -> tuple[Tensor, Tensor]:
    """(m_sq: R x C, m_qs: (S*T) x C), both computed from the un-enhanced inputs."""
    m_sq, m_qs = mem(f_q, f_s_flat)
    return m_sq, m_qs


class ResidualBlock(nn.Module):
    """c1(relu(c2(I))) + I with a C -> C/r bottleneck."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"channels ({channels}) must be divisible by reduction ({reduction})")
        self.c2 = Linear(channels, channels // reduction)
        self.c1 = Linear(channels // reduction, channels)

    def forward(self, x: Tensor) -> Tensor:
        out: Tensor = self.c1(elementwise(self.c2(x), Activation.RELU)) + x
        return out


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    out: Tensor = block(x)
    return out


def progressive_align(
    m_sq: Tensor,
    m_qs: Tensor,
    depth: int,
    blocks: list[BasicBlock],
    res: ResidualBlock,
) -> Tensor:
    """
    P_0 = m_sq; P_k = block_k(P_{k-1}, res(m_qs)) for k = 1..depth.

    The recalibrated support representation is computed once and shared by all depths.
    """
    if depth < 1 or len(blocks) != depth:
        raise ConfigError(f"progressive_align: depth {depth} with {len(blocks)} parameter sets")
    support = res(m_qs)
    p = m_sq
    for block in blocks:
        p = block(p, support)
    return p


class ProgressiveAlignment(nn.Module):
    """Depth-`n` stack; parameters are named k0..k{n-1} and res."""

    def __init__(
        self,
        channels: int,
        attention_dim: int,
        value_dim: int,
        depth: int = 3,
        reduction: int = 4,
        scale: bool = False,
    ):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        self.depth = depth
        for k in range(depth):
            self.add_module(f"k{k}", BasicBlock(channels, attention_dim, value_dim, scale))
        self.res = ResidualBlock(channels, reduction)

    @property
    def blocks(self) -> list[BasicBlock]:
        return [getattr(self, f"k{k}") for k in range(self.depth)]

    def forward(self, m_sq: Tensor, m_qs: Tensor) -> Tensor:
        return progressive_align(m_sq, m_qs, self.depth, self.blocks, self.res)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last axis; 0 where either side has zero norm."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    denom = na * nb
    zero = denom == 0
    if bool(zero.any()):
        log.debug(f"pairwise_match: {int(zero.sum())} zero-norm pairs, cosine set to 0")
    cos = (a * b).sum(dim=-1) / torch.where(zero, torch.ones_like(denom), denom)
    return torch.where(zero, torch.zeros_like(cos), cos)


def pairwise_match(p_n: Tensor, m_qs: Tensor) -> Tensor:
    """
    Match weights W (S x R x 1) between proposals P_n (R x C) and supports (S x T x C).

    Each support is mean-pooled over T. M is the cosine over channels, N the
    Euclidean distance, and W = M * sigmoid(-N), so every entry lies in [-0.5, 0.5].
    """
    if m_qs.ndim != 3 or p_n.ndim != 2 or m_qs.shape[2] != p_n.shape[1]:
        raise ContractViolation(
            f"pairwise_match: expected (R x C) and (S x T x C), got {tuple(p_n.shape)} and {tuple(m_qs.shape)}"
        )
    pooled = m_qs.mean(dim=1)  # S x C
    e = p_n.unsqueeze(0).expand(pooled.shape[0], -1, -1)  # S x R x C
    b = pooled.unsqueeze(1).expand_as(e)
    m = _cosine(e, b)
    n = torch.linalg.vector_norm(e - b, dim=-1)
    return (m * elementwise(-n, Activation.SIGMOID)).unsqueeze(-1)


def fuse(p_n: Tensor, weights: Tensor) -> Tensor:
    """Scale each proposal row by its weight averaged over supports."""
    if weights.ndim != 3 or weights.shape[1] != p_n.shape[0]:
        raise ContractViolation(
            f"fuse: weights {tuple(weights.shape)} do not match {p_n.shape[0]} proposals"
        )
    return p_n * weights.mean(dim=0)


@dataclass
class AlignmentOutput:
    fused: Tensor
    weights: Tensor | None
    p_n: Tensor


def align(
    f_q: Tensor,
    f_s: Tensor,
    mem: MutualEnhancement | None,
    pam: ProgressiveAlignment | None,
    use_pmm: bool = True,
) -> AlignmentOutput:
    """
    Full alignment of proposal features F_Q (R x C) with supports F_S (S x T x C).

    Passing None for a module skips it: without MEM the inputs pass through
    unchanged, without PAM P_n = m_sq, and without PMM the output is P_n. With all
    three disabled the mean support representation is added to every proposal.
    """
    if f_s.ndim != 3 or f_q.ndim != 2 or f_s.shape[2] != f_q.shape[1]:
        raise ContractViolation(
            f"align: expected (R x C) and (S x T x C), got {tuple(f_q.shape)} and {tuple(f_s.shape)}"
        )
    if mem is None and pam is None and not use_pmm:
        baseline = f_q + f_s.mean(dim=(0, 1))
        return AlignmentOutput(fused=baseline, weights=None, p_n=baseline)

    s, t, c = f_s.shape
    f_s_flat = f_s.reshape(s * t, c)
    if mem is not None:
        m_sq, m_qs_flat = mem(f_q, f_s_flat)
    else:
        m_sq, m_qs_flat = f_q, f_s_flat
    p_n = pam(m_sq, m_qs_flat) if pam is not None else m_sq
    if not use_pmm:
        return AlignmentOutput(fused=p_n, weights=None, p_n=p_n)
    weights = pairwise_match(p_n, m_qs_flat.reshape(s, t, c))
    return AlignmentOutput(fused=fuse(p_n, weights), weights=weights, p_n=p_n)


def basic_block_parameter_count(channels: int, attention_dim: int, value_dim: int) -> int:
    """Parameters added per unit of progressive-alignment depth."""
    return 2 * (channels * attention_dim + attention_dim) + (channels * value_dim + value_dim) + (
        value_dim * channels + channels
    )

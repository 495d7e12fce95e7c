"""
Brute-force oracle suites and finite-difference gradient checks.

Each suite compares a vectorized implementation with an independent, slow
reference on seeded random instances. `run_gradchecks` compares autograd with
central differences for every trainable building block in float64.
"""

import logging
import random
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .alignment import (
    BasicBlock,
    MutualEnhancement,
    ProgressiveAlignment,
    ResidualBlock,
    align,
    basic_block_parameter_count,
    fuse,
    pairwise_match,
)
from .diffcore import VERIFY_DTYPE, Linear, count_parameters, gradcheck, softmax_rows
from .evaluation import episode_ap
from .heads import IGNORE, ClassificationHead, HeadOutputs, LossTargets, joint_loss
from .models import PredictionSet, ScoredSegment, TemporalSegment
from .proposals import ProposalHead, anchor_array
from .temporal import decode_offsets, encode_offsets, nms_indices, tiou

GRADCHECK_TOLERANCE = 1e-5

log = logging.getLogger("commonloc.selftest")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _random_segment(rng: random.Random, extent: int = 100) -> TemporalSegment:
    start = rng.randint(0, extent - 1)
    return TemporalSegment(float(start), float(rng.randint(start + 1, extent)))


def oracle_nms(segments: list[TemporalSegment], scores: list[float], threshold: float) -> list[int]:
    order = sorted(range(len(segments)), key=lambda i: (-scores[i], segments[i].start, i))
    kept: list[int] = []
    for i in order:
        if all(tiou(segments[i], segments[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def oracle_ap(predictions: list[ScoredSegment], gts: list[TemporalSegment], threshold: float) -> float:
    """AP as the sum, over true positives, of the best precision at or after that rank."""
    ranked = sorted(predictions, key=lambda p: (-p.score, p.segment.start, p.segment.end))
    free = [True] * len(gts)
    flags = []
    for p in ranked:
        overlaps = [(tiou(p.segment, g), -j) for j, g in enumerate(gts)]
        hits_free = [o for o in overlaps if free[-o[1]] and o[0] > threshold]
        if hits_free:
            free[-max(hits_free)[1]] = False
        flags.append(bool(hits_free))

    precisions = []
    hits = 0
    for k, flag in enumerate(flags, start=1):
        hits += flag
        precisions.append(hits / k)
    total = 0.0
    for k, flag in enumerate(flags):
        if flag:
            total += max(precisions[k:])
    return total / len(gts)


def check_nms(seed: int, instances: int) -> CheckResult:
    rng = random.Random(seed)
    for n in range(instances):
        count = rng.randint(1, 50)
        segments = [_random_segment(rng) for _ in range(count)]
        scores = [round(rng.random(), 1) for _ in range(count)]
        threshold = rng.choice([0.0, 0.3, 0.5, 0.7, 1.0])
        arr = np.array([[s.start, s.end] for s in segments])
        got = nms_indices(arr, scores, threshold).tolist()
        want = oracle_nms(segments, scores, threshold)
        if got != want:
            return CheckResult("nms", False, f"instance {n}: {got} != {want}")
    return CheckResult("nms", True, f"{instances} instances")


def check_ap(seed: int, instances: int) -> CheckResult:
    rng = random.Random(seed)
    worst = 0.0
    for _ in range(instances):
        gts = [_random_segment(rng, 60) for _ in range(rng.randint(1, 3))]
        preds = [
            ScoredSegment(_random_segment(rng, 60), round(rng.random(), 2)) for _ in range(rng.randint(0, 6))
        ]
        threshold = rng.choice([0.3, 0.5, 0.7, 0.9])
        got = episode_ap(PredictionSet("oracle", preds), gts, threshold)
        want = oracle_ap(preds, gts, threshold)
        worst = max(worst, abs((got or 0.0) - want))
    return CheckResult("average_precision", worst <= 1e-9, f"max |diff| {worst:.2e}")


def check_offsets(seed: int, instances: int) -> CheckResult:
    rng = random.Random(seed)
    worst = 0.0
    for _ in range(instances):
        proposal = _random_segment(rng, 1000)
        target = _random_segment(rng, 1000)
        back = decode_offsets(proposal, encode_offsets(proposal, target))
        worst = max(worst, abs(back.start - target.start), abs(back.end - target.end))
    return CheckResult("offset_round_trip", worst <= 1e-9, f"max |diff| {worst:.2e} frames")


def check_alignment_properties(seed: int, instances: int) -> CheckResult:
    torch.manual_seed(seed)
    c = 8
    rows = softmax_rows(torch.randn(16, 11, dtype=VERIFY_DTYPE) * 10).sum(dim=1)
    if not torch.allclose(rows, torch.ones_like(rows), atol=1e-12):
        return CheckResult("alignment", False, "softmax rows do not sum to 1")

    block = BasicBlock(c, 4, 4).to(VERIFY_DTYPE)
    with torch.no_grad():
        block.c1.weight.zero_()
        block.c1.bias.zero_()
    i1, i2 = torch.randn(5, c, dtype=VERIFY_DTYPE), torch.randn(7, c, dtype=VERIFY_DTYPE)
    if not torch.equal(block(i1, i2), i1):
        return CheckResult("alignment", False, "zeroed output projection is not the identity")

    for _ in range(instances):
        p_n = torch.randn(4, c, dtype=VERIFY_DTYPE) * 3
        m_qs = torch.randn(3, 2, c, dtype=VERIFY_DTYPE) * 3
        w = pairwise_match(p_n, m_qs)
        if float(w.min()) < -0.5 or float(w.max()) > 0.5:
            return CheckResult("alignment", False, f"match weight outside [-0.5, 0.5]: {w.flatten().tolist()}")
    support = torch.randn(1, 3, c, dtype=VERIFY_DTYPE)
    self_match = pairwise_match(support.mean(dim=1), support)
    if abs(float(self_match) - 0.5) > 1e-12:
        return CheckResult("alignment", False, f"self-match weight {float(self_match)} != 0.5")

    step = count_parameters(ProgressiveAlignment(c, 4, 4, depth=4)) - count_parameters(
        ProgressiveAlignment(c, 4, 4, depth=3)
    )
    if step != basic_block_parameter_count(c, 4, 4):
        return CheckResult("alignment", False, f"depth step adds {step} parameters")
    return CheckResult("alignment", True, f"{instances} match instances")


def run_gradchecks(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """
    Max relative gradient error per building block (R=4 proposals, S=2 supports,
    T=2 parts, C=8 channels, float64).
    """
    torch.manual_seed(seed)
    r, s, t, c, d = 4, 2, 2, 8, 4

    def leaf(*shape: int) -> Tensor:
        return torch.randn(*shape, dtype=VERIFY_DTYPE, requires_grad=True)

    f_q, f_s, f_s_flat = leaf(r, c), leaf(s, t, c), leaf(s * t, c)
    p_n, weights, context = leaf(r, c), leaf(s, r, 1), leaf(r, 2 * c)
    lin = Linear(c, 3).to(VERIFY_DTYPE)
    block = BasicBlock(c, d, d).to(VERIFY_DTYPE)
    mem = MutualEnhancement(c, d, d).to(VERIFY_DTYPE)
    res = ResidualBlock(c, 4).to(VERIFY_DTYPE)
    pam = ProgressiveAlignment(c, d, d, depth=3).to(VERIFY_DTYPE)
    head = ClassificationHead(c).to(VERIFY_DTYPE)
    with torch.no_grad():
        head.context.weight.normal_(0.0, 0.5)
    proposal = ProposalHead(c).to(VERIFY_DTYPE)
    steps = leaf(6, c)
    anchors = anchor_array(6, (16, 32), 8)

    labels = np.array([1, 0, IGNORE, 1], dtype=np.int64)
    targets = LossTargets(labels, np.random.default_rng(seed).normal(0.0, 0.3, size=(r, 2)))
    valid = torch.ones(r, dtype=torch.bool)
    logits, offsets = leaf(r), leaf(r, 2)

    gen = torch.Generator().manual_seed(seed)

    def weighted_sum(fn: Callable[[], Tensor]) -> Callable[[], Tensor]:
        w = torch.randn(fn().shape, dtype=VERIFY_DTYPE, generator=gen)
        return lambda: (fn() * w).sum()

    def params(*modules: torch.nn.Module) -> list[Tensor]:
        return [p for m in modules for p in m.parameters()]

    def aligned_loss() -> Tensor:
        fused = align(f_q, f_s, mem, pam, True).fused
        return joint_loss(head(fused, valid), targets).total

    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {
        "linear": (weighted_sum(lambda: lin(f_q)), [f_q, *params(lin)]),
        "softmax_rows": (weighted_sum(lambda: softmax_rows(f_q)), [f_q]),
        "basic_block": (weighted_sum(lambda: block(f_q, f_s_flat)), [f_q, f_s_flat, *params(block)]),
        "mutual_enhancement": (
            weighted_sum(lambda: torch.cat(list(mem(f_q, f_s_flat)), dim=0)),
            [f_q, f_s_flat, *params(mem)],
        ),
        "residual_block": (weighted_sum(lambda: res(f_s_flat)), [f_s_flat, *params(res)]),
        "progressive_alignment": (weighted_sum(lambda: pam(f_q, f_s_flat)), [f_q, f_s_flat, *params(pam)]),
        "pairwise_match": (weighted_sum(lambda: pairwise_match(p_n, f_s)), [p_n, f_s]),
        "fuse": (weighted_sum(lambda: fuse(p_n, weights)), [p_n, weights]),
        "proposal_head": (
            weighted_sum(lambda: torch.cat([o.reshape(-1) for o in proposal(steps, anchors, 8)[:2]])),
            [steps, *params(proposal)],
        ),
        "classification_head": (
            weighted_sum(lambda: torch.cat([head(p_n, None, context).logits, head(p_n, None, context).offsets.reshape(-1)])),
            [p_n, context, *params(head)],
        ),
        "joint_loss": (lambda: joint_loss(HeadOutputs(logits, offsets, valid), targets).total, [logits, offsets]),
        "alignment_to_loss": (aligned_loss, [f_q, f_s, *params(mem, pam, head)]),
    }

    errors = {}
    for name, (fn, tensors) in cases.items():
        errors[name] = gradcheck(fn, tensors, eps=eps)
        log.debug(f"gradcheck {name}: {errors[name]:.2e}")
    return errors


def check_gradients(seed: int) -> CheckResult:
    errors = run_gradchecks(seed)
    worst = max(errors, key=lambda k: errors[k])
    return CheckResult(
        "gradcheck", errors[worst] < GRADCHECK_TOLERANCE, f"worst {worst} {errors[worst]:.2e}"
    )


def run_selftest(seed: int = 0, instances: int = 1000, gradients: bool = True) -> list[CheckResult]:
    """Run every oracle suite; returns one result per suite."""
    checks = [
        check_nms(seed, instances),
        check_ap(seed, instances),
        check_offsets(seed, instances),
        check_alignment_properties(seed, instances),
    ]
    if gradients:
        checks.append(check_gradients(seed))
    for check in checks:
        level = logging.INFO if check.passed else logging.ERROR
        log.log(level, f"{check.name}: {'ok' if check.passed else 'FAILED'} ({check.detail})")
    return checks


def all_passed(checks: list[CheckResult]) -> bool:
    return all(c.passed for c in checks)

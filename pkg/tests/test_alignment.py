"""Unit tests for mutual enhancement, progressive alignment and pairwise matching."""

import pytest
import torch

from commonloc.alignment import (
    BasicBlock,
    MutualEnhancement,
    ProgressiveAlignment,
    ResidualBlock,
    align,
    basic_block,
    basic_block_parameter_count,
    fuse,
    mutual_enhance,
    pairwise_match,
    progressive_align,
    residual_block,
)
from commonloc.config import ConfigError
from commonloc.diffcore import count_parameters
from commonloc.models import ContractViolation

C, D = 8, 4


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def zero_(linear):
    with torch.no_grad():
        linear.weight.zero_()
        linear.bias.zero_()


class TestBasicBlock:
    """Tests for residual cross-attention."""

    def test_attention_rows_are_distributions(self):
        block = BasicBlock(C, D, D)
        weights = block.attention(torch.randn(5, C), torch.randn(7, C))
        assert weights.shape == (5, 7)
        torch.testing.assert_close(weights.sum(dim=1), torch.ones(5))

    def test_zero_output_projection_is_identity(self):
        block = BasicBlock(C, D, D)
        zero_(block.c1)
        i1 = torch.randn(3, C)
        assert torch.equal(basic_block(i1, torch.randn(6, C), block), i1)

    def test_output_shape_follows_first_input(self):
        assert BasicBlock(C, D, D)(torch.randn(3, C), torch.randn(9, C)).shape == (3, C)

    def test_channel_mismatch(self):
        with pytest.raises(ContractViolation):
            BasicBlock(C, D, D)(torch.randn(3, C), torch.randn(4, C + 1))

    def test_scaled_attention_flatter(self):
        """Scaling by 1/sqrt(d) never sharpens the attention distribution."""
        plain = BasicBlock(C, D, D)
        scaled = BasicBlock(C, D, D, scale=True)
        scaled.load_state_dict(plain.state_dict())
        i1, i2 = torch.randn(4, C) * 5, torch.randn(6, C) * 5
        assert scaled.attention(i1, i2).max() <= plain.attention(i1, i2).max() + 1e-6


class TestMutualEnhancement:
    """Tests for the two enhancement streams."""

    def test_shapes(self):
        m_sq, m_qs = mutual_enhance(torch.randn(10, C), torch.randn(6, C), MutualEnhancement(C, D, D))
        assert m_sq.shape == (10, C)
        assert m_qs.shape == (6, C)

    def test_streams_independent(self):
        """Each stream reads the un-enhanced inputs."""
        mem = MutualEnhancement(C, D, D)
        f_q, f_s = torch.randn(4, C), torch.randn(6, C)
        m_sq, m_qs = mem(f_q, f_s)
        assert torch.equal(m_sq, mem.sq(f_q, f_s))
        assert torch.equal(m_qs, mem.qs(f_s, f_q))


class TestProgressiveAlignment:
    """Tests for the depth-n stack."""

    def test_depth_adds_one_block(self):
        shallow = ProgressiveAlignment(C, D, D, depth=2)
        deep = ProgressiveAlignment(C, D, D, depth=3)
        assert count_parameters(deep) - count_parameters(shallow) == basic_block_parameter_count(C, D, D)

    def test_parameter_names(self):
        names = {n.split(".")[0] for n, _ in ProgressiveAlignment(C, D, D, depth=2).named_parameters()}
        assert names == {"k0", "k1", "res"}

    def test_zero_depth_rejected(self):
        with pytest.raises(ConfigError):
            ProgressiveAlignment(C, D, D, depth=0)

    def test_residual_reduction_divides_channels(self):
        with pytest.raises(ConfigError):
            ResidualBlock(10, reduction=4)

    def test_zeroed_blocks_pass_proposals_through(self):
        pam = ProgressiveAlignment(C, D, D, depth=3)
        for block in pam.blocks:
            zero_(block.c1)
        m_sq = torch.randn(5, C)
        assert torch.equal(pam(m_sq, torch.randn(8, C)), m_sq)

    def test_blocks_must_match_depth(self):
        pam = ProgressiveAlignment(C, D, D, depth=2)
        with pytest.raises(ConfigError):
            progressive_align(torch.randn(5, C), torch.randn(8, C), 3, pam.blocks, pam.res)

    def test_function_matches_module(self):
        pam = ProgressiveAlignment(C, D, D, depth=2)
        m_sq, m_qs = torch.randn(5, C), torch.randn(8, C)
        expected = pam.k1(pam.k0(m_sq, pam.res(m_qs)), pam.res(m_qs))
        assert torch.allclose(progressive_align(m_sq, m_qs, 2, pam.blocks, pam.res), expected)

    def test_zeroed_residual_is_identity(self):
        res = ResidualBlock(C)
        zero_(res.c1)
        x = torch.randn(2, 3, C)
        assert torch.equal(residual_block(x, res), x)


class TestPairwiseMatch:
    """Tests for match weights and fusion."""

    def test_weights_bounded(self):
        weights = pairwise_match(torch.randn(20, C) * 3, torch.randn(4, 5, C) * 3)
        assert weights.shape == (4, 20, 1)
        assert weights.min() >= -0.5
        assert weights.max() <= 0.5

    def test_self_match_is_half(self):
        support = torch.randn(1, 3, C)
        proposal = support.mean(dim=1)
        assert pairwise_match(proposal, support).item() == pytest.approx(0.5)

    def test_opposite_match_negative(self):
        support = torch.ones(1, 2, C)
        assert pairwise_match(-torch.ones(1, C), support).item() < 0

    def test_zero_norm_gives_zero(self):
        assert pairwise_match(torch.zeros(2, C), torch.randn(1, 3, C)).abs().max().item() == 0.0

    def test_fuse_scales_by_mean_weight(self):
        p_n = torch.ones(2, C)
        weights = torch.tensor([[[0.2], [0.4]], [[0.4], [0.0]]])
        fused = fuse(p_n, weights)
        torch.testing.assert_close(fused[:, 0], torch.tensor([0.3, 0.2]))

    def test_fuse_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            fuse(torch.ones(3, C), torch.ones(2, 4, 1))


class TestAlign:
    """Tests for the composed alignment and its ablations."""

    def test_full(self):
        out = align(
            torch.randn(12, C),
            torch.randn(3, 4, C),
            MutualEnhancement(C, D, D),
            ProgressiveAlignment(C, D, D, depth=2),
        )
        assert out.fused.shape == (12, C)
        assert out.weights.shape == (3, 12, 1)

    def test_without_pmm_returns_aligned(self):
        out = align(torch.randn(6, C), torch.randn(2, 4, C), MutualEnhancement(C, D, D), None, use_pmm=False)
        assert out.weights is None
        assert torch.equal(out.fused, out.p_n)

    def test_pmm_only_uses_raw_inputs(self):
        f_q, f_s = torch.randn(6, C), torch.randn(2, 4, C)
        out = align(f_q, f_s, None, None, use_pmm=True)
        torch.testing.assert_close(out.fused, fuse(f_q, pairwise_match(f_q, f_s)))

    def test_baseline_adds_mean_support(self):
        f_q, f_s = torch.randn(6, C), torch.randn(2, 4, C)
        out = align(f_q, f_s, None, None, use_pmm=False)
        torch.testing.assert_close(out.fused, f_q + f_s.mean(dim=(0, 1)))

    def test_support_order_irrelevant(self):
        """Permuting supports leaves the fused features unchanged up to rounding."""
        mem, pam = MutualEnhancement(C, D, D), ProgressiveAlignment(C, D, D, depth=2)
        f_q, f_s = torch.randn(6, C, dtype=torch.float64), torch.randn(3, 4, C, dtype=torch.float64)
        mem.double()
        pam.double()
        a = align(f_q, f_s, mem, pam).fused
        b = align(f_q, f_s[[2, 0, 1]], mem, pam).fused
        torch.testing.assert_close(a, b)

    def test_rank_mismatch(self):
        with pytest.raises(ContractViolation):
            align(torch.randn(6, C), torch.randn(4, C), None, None)

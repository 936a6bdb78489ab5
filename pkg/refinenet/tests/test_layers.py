"""Dynamic-convolution layers: gating identities and aggregation oracle."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from refinenet.layers import (AttentionGate, DynamicConv2d, DynamicConvSpec,
                              ResidualDynamicBlock, temperature_softmax)


class TestTemperatureSoftmax:
    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_equal_logits_give_uniform_weights(self, k):
        pi = temperature_softmax(torch.full((4, k), 1.7), 2.5)
        assert torch.allclose(pi, torch.full((4, k), 1.0 / k))

    def test_high_temperature_flattens_any_logits(self):
        logits = torch.tensor([[3.0, -1.0, 0.5], [10.0, 0.0, -10.0]])
        pi = temperature_softmax(logits, 1e6)
        assert (pi - 1.0 / 3).abs().max() < 1e-4

    def test_two_zero_logit_example(self):
        pi = temperature_softmax(torch.tensor([2.0, 0.0]), 1.0)
        e2 = math.exp(2.0)
        assert abs(float(pi[0]) - e2 / (e2 + 1.0)) < 1e-7
        assert abs(float(pi[0]) - 0.8808) < 5e-5
        assert abs(float(pi[1]) - 0.1192) < 5e-5

    def test_sharpening_at_low_temperature(self):
        logits = torch.tensor([1.0, 0.0])
        hot = temperature_softmax(logits, 30.0)
        cold = temperature_softmax(logits, 0.1)
        assert float(cold[0]) > float(hot[0])

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_temperature_rejected(self, t):
        with pytest.raises(ValueError, match="temperature"):
            temperature_softmax(torch.zeros(2), t)


class TestAttentionGate:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1),
           st.floats(0.05, 50.0))
    def test_simplex_property(self, channels, experts, seed, temperature):
        torch.manual_seed(seed)
        gate = AttentionGate(DynamicConvSpec(
            channels, channels, experts=experts, temperature=temperature))
        with torch.no_grad():
            pi = gate(torch.randn(3, channels, 5, 5) * 10)
        assert pi.shape == (3, experts)
        assert float((pi.sum(dim=1) - 1.0).abs().max()) < 1e-6
        assert float(pi.min()) >= 0.0 and float(pi.max()) <= 1.0

    def test_fresh_gate_with_zeroed_logits_is_uniform(self):
        gate = AttentionGate(DynamicConvSpec(3, 3, experts=4))
        torch.nn.init.zeros_(gate.expand.weight)
        torch.nn.init.zeros_(gate.expand.bias)
        pi = gate(torch.randn(2, 3, 4, 4))
        assert torch.allclose(pi, torch.full((2, 4), 0.25))

    def test_squeeze_uses_quarter_reduction(self):
        gate = AttentionGate(DynamicConvSpec(16, 16, experts=2, reduction=4))
        assert gate.squeeze.out_features == 4
        tiny = AttentionGate(DynamicConvSpec(2, 2, experts=2, reduction=4))
        assert tiny.squeeze.out_features == 1

    def test_gate_depends_only_on_channel_means(self):
        torch.manual_seed(7)
        gate = AttentionGate(DynamicConvSpec(3, 3, experts=2))
        x = torch.randn(2, 3, 4, 4)
        shuffled = x.reshape(2, 3, -1)[..., torch.randperm(16)].reshape(2, 3, 4, 4)
        assert torch.allclose(gate(x), gate(shuffled), atol=1e-6)

    def test_channel_mismatch_rejected(self):
        gate = AttentionGate(DynamicConvSpec(3, 3))
        with pytest.raises(ValueError, match="expected"):
            gate(torch.randn(1, 4, 4, 4))


class TestDynamicConvSpec:
    @pytest.mark.parametrize("kwargs", [
        dict(in_channels=0, out_channels=1),
        dict(in_channels=1, out_channels=0),
        dict(in_channels=1, out_channels=1, kernel_size=2),
        dict(in_channels=1, out_channels=1, experts=0),
        dict(in_channels=1, out_channels=1, reduction=0),
        dict(in_channels=1, out_channels=1, temperature=0.0),
        dict(in_channels=1, out_channels=1, temperature=-3.0),
    ])
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            DynamicConvSpec(**kwargs)


class TestDynamicConv2d:
    def test_identical_experts_collapse_to_static_conv(self):
        torch.manual_seed(11)
        conv = DynamicConv2d(DynamicConvSpec(2, 3, experts=4))
        with torch.no_grad():
            for e in range(1, 4):
                conv.weight[e].copy_(conv.weight[0])
                conv.bias[e].copy_(conv.bias[0])
            # Randomize the gate so the attention state is arbitrary.
            for p in conv.attention.parameters():
                p.normal_()
        x = torch.randn(5, 2, 6, 6)
        with torch.no_grad():
            static = F.conv2d(x, conv.weight[0], conv.bias[0], padding=1)
            assert float((conv(x) - static).abs().max()) < 1e-6

    def test_single_expert_is_static_conv(self):
        torch.manual_seed(12)
        conv = DynamicConv2d(DynamicConvSpec(3, 2, experts=1))
        x = torch.randn(4, 3, 5, 5)
        with torch.no_grad():
            static = F.conv2d(x, conv.weight[0], conv.bias[0], padding=1)
            assert float((conv(x) - static).abs().max()) < 1e-6

    def test_matches_loop_based_aggregation_oracle(self):
        torch.manual_seed(13)
        conv = DynamicConv2d(DynamicConvSpec(1, 2, experts=2)).double()
        x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        got = conv(x).detach().numpy()

        pi = conv.attention(x).detach().numpy()
        weight = conv.weight.detach().numpy()
        bias = conv.bias.detach().numpy()
        padded = np.pad(x.numpy(), ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 2, 4, 4))
        for b in range(2):
            w = pi[b, 0] * weight[0] + pi[b, 1] * weight[1]
            bb = pi[b, 0] * bias[0] + pi[b, 1] * bias[1]
            for oc in range(2):
                for yy in range(4):
                    for xx in range(4):
                        acc = bb[oc]
                        for ic in range(1):
                            for ky in range(3):
                                for kx in range(3):
                                    acc += (w[oc, ic, ky, kx]
                                            * padded[b, ic, yy + ky, xx + kx])
                        expected[b, oc, yy, xx] = acc
        assert np.abs(got - expected).max() < 1e-6

    def test_batched_forward_matches_per_sample_forward(self):
        torch.manual_seed(14)
        conv = DynamicConv2d(DynamicConvSpec(2, 2, experts=2))
        with torch.no_grad():
            for p in conv.attention.parameters():
                p.normal_()
        a = torch.randn(1, 2, 6, 6)
        b = torch.randn(1, 2, 6, 6) * 5
        together = conv(torch.cat([a, b]))
        assert torch.allclose(together[0], conv(a)[0], atol=1e-6)
        assert torch.allclose(together[1], conv(b)[0], atol=1e-6)

    def test_preserves_spatial_shape(self):
        conv = DynamicConv2d(DynamicConvSpec(2, 7, kernel_size=5))
        assert conv(torch.randn(3, 2, 9, 11)).shape == (3, 7, 9, 11)

    def test_channel_mismatch_rejected(self):
        conv = DynamicConv2d(DynamicConvSpec(3, 3))
        with pytest.raises(ValueError, match="expected"):
            conv(torch.randn(2, 5, 4, 4))


class TestResidualDynamicBlock:
    def test_fresh_block_is_identity_on_nonnegative_input(self):
        torch.manual_seed(21)
        block = ResidualDynamicBlock(3, 3)
        x = torch.rand(2, 3, 8, 8)
        block.eval()
        assert torch.equal(block(x), x)
        block.train()
        assert torch.equal(block(x), x)

    def test_fresh_block_reduces_to_projection_on_channel_change(self):
        torch.manual_seed(22)
        block = ResidualDynamicBlock(2, 5)
        block.eval()
        x = torch.randn(2, 2, 8, 8)
        assert torch.equal(block(x), F.relu(block.project(x)))

    def test_projection_only_when_channels_differ(self):
        assert ResidualDynamicBlock(4, 4).project is None
        assert ResidualDynamicBlock(4, 6).project is not None

    def test_preserves_spatial_shape_after_training_steps(self):
        torch.manual_seed(23)
        block = ResidualDynamicBlock(2, 4)
        # Perturb all parameters so the conv path is active.
        with torch.no_grad():
            for p in block.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        with torch.no_grad():
            out = block(torch.randn(3, 2, 6, 10))
        assert out.shape == (3, 4, 6, 10)
        assert float(out.min()) >= 0.0

    def test_output_is_nonnegative(self):
        torch.manual_seed(24)
        block = ResidualDynamicBlock(3, 3)
        with torch.no_grad():
            for p in block.parameters():
                p.add_(torch.randn_like(p))
            assert float(block(torch.randn(2, 3, 8, 8)).min()) >= 0.0

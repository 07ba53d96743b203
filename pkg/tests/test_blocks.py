"""Composite-layer behavior: conv blocks, channel attention, encoder and
decoder stages, and single sub-network wiring."""

import numpy as np
import pytest

import oracles
from roie_net import blocks, tensor_core as tc
from roie_net.errors import ConfigError, ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _x(rng, shape, dtype=np.float32):
    return tc.Tensor(rng.random(shape).astype(dtype))


class TestAttentionBottleneckWidth:
    def test_regular_division(self):
        assert blocks.attention_bottleneck_width(64, 8) == 8
        assert blocks.attention_bottleneck_width(512, 8) == 64

    def test_floor_clamps_small_widths(self):
        assert blocks.attention_bottleneck_width(8, 8) == 4
        assert blocks.attention_bottleneck_width(4, 8) == 4
        assert blocks.attention_bottleneck_width(16, 8) == 4

    def test_indivisible_outside_clamp_raises(self):
        with pytest.raises(ConfigError):
            blocks.attention_bottleneck_width(33, 8)


class TestConvBlock:
    def test_preserves_spatial_dims_and_nonnegative(self, rng):
        block = blocks.ConvBlock("b", 3, 8, rng, np.float32)
        out = block.forward(_x(rng, (2, 3, 6, 6)), "train")
        assert out.shape == (2, 8, 6, 6)
        assert np.all(out.data >= 0)

    def test_identity_weights_pass_positive_constant(self, rng):
        block = blocks.ConvBlock("b", 2, 2, rng, np.float64)
        # depthwise center-delta, pointwise identity, BN eval with neutral stats
        dw = np.zeros((2, 1, 3, 3))
        dw[:, 0, 1, 1] = 1.0
        block.depthwise.tensor.data = dw
        block.pointwise.tensor.data = np.eye(2).reshape(2, 2, 1, 1)
        block.running_mean[:] = 0.0
        block.running_var[:] = 1.0 - blocks.BN_EPSILON
        x = tc.Tensor(np.full((1, 2, 4, 4), 0.7))
        out = block.forward(x, "eval")
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-7)

    def test_channel_mismatch_raises(self, rng):
        block = blocks.ConvBlock("b", 3, 4, rng, np.float32)
        with pytest.raises(ShapeError):
            block.forward(_x(rng, (1, 2, 4, 4)), "train")


class TestChannelAttention:
    def test_zero_weights_halve_input(self, rng):
        att = blocks.ChannelAttention("a", 8, 2, rng, np.float32)
        att.squeeze.tensor.data = np.zeros_like(att.squeeze.data)
        att.excite.tensor.data = np.zeros_like(att.excite.data)
        x = _x(rng, (2, 8, 3, 3))
        out = att.forward(x)
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-6)

    def test_per_channel_scalar_structure(self, rng):
        att = blocks.ChannelAttention("a", 4, 2, rng, np.float32)
        x = _x(rng, (1, 4, 5, 5))
        out = att.forward(x)
        for c in range(4):
            ratio = out.data[0, c] / x.data[0, c]
            assert np.allclose(ratio, ratio.flat[0], rtol=1e-5)
            assert 0.0 < ratio.flat[0] < 1.0

    def test_matches_composition_oracle(self, rng):
        att = blocks.ChannelAttention("a", 4, 2, rng, np.float64)
        x = rng.random((1, 4, 2, 2))
        out = att.forward(tc.Tensor(x))
        expected = oracles.channel_attention_composition(x, att.squeeze.data, att.excite.data)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10)

    def test_scaling_input_keeps_multiplier_in_unit_interval(self, rng):
        att = blocks.ChannelAttention("a", 4, 2, rng, np.float64)
        x = rng.random((1, 4, 3, 3)) + 0.1
        for lam in (0.5, 1.0, 10.0):
            out = att.forward(tc.Tensor(lam * x))
            mult = out.data / (lam * x)
            assert np.all(mult > 0.0) and np.all(mult < 1.0)


class TestEncoderStage:
    def test_shapes(self, rng):
        enc = blocks.EncoderStage("e", 3, 16, 8, rng, np.float32)
        features, pooled = enc.forward(_x(rng, (2, 3, 8, 8)), "train")
        assert features.shape == (2, 16, 8, 8)
        assert pooled.shape == (2, 16, 4, 4)

    def test_five_stage_resolution_chain(self, rng):
        widths = [32, 64, 128, 256, 512]
        x = _x(rng, (1, 3, 256, 256))
        resolutions = []
        c_in = 3
        for w in widths:
            enc = blocks.EncoderStage(f"e{w}", c_in, w, 8, rng, np.float32)
            features, x = enc.forward(x, "train")
            resolutions.append(features.shape[2])
            c_in = w
        assert resolutions == [256, 128, 64, 32, 16]

    def test_gradient_reaches_both_outputs(self, rng):
        enc = blocks.EncoderStage("e", 2, 4, 2, rng, np.float64)
        x = tc.Tensor(rng.random((1, 2, 4, 4)), requires_grad=True)
        features, pooled = enc.forward(x, "train")
        probe_f = tc.Tensor(rng.standard_normal(features.data.shape))
        probe_p = tc.Tensor(rng.standard_normal(pooled.data.shape))
        loss = tc.ew_add(
            tc.reduce_mean(tc.ew_mul(features, probe_f)),
            tc.reduce_mean(tc.ew_mul(pooled, probe_p)),
        )
        tc.backward(loss)
        assert x.grad is not None and np.any(x.grad != 0)
        for p in enc.parameters():
            assert p.grad is not None

    def test_odd_dims_raise(self, rng):
        enc = blocks.EncoderStage("e", 2, 4, 2, rng, np.float32)
        with pytest.raises(ShapeError):
            enc.forward(_x(rng, (1, 2, 5, 6)), "train")


class TestDecoderStage:
    def test_concat_arithmetic(self, rng):
        dec = blocks.DecoderStage("d", below_channels=8, skip_channels=4, width=4, ratio=2, rng=rng, dtype=np.float32)
        assert dec.in_channels == 12
        below = _x(rng, (1, 8, 4, 4))
        skip = _x(rng, (1, 4, 8, 8))
        out = dec.forward(below, [skip], "train")
        assert out.shape == (1, 4, 8, 8)

    def test_zero_skips_raise(self, rng):
        dec = blocks.DecoderStage("d", 8, 4, 4, 2, rng, np.float32)
        with pytest.raises(ConfigError):
            dec.forward(_x(rng, (1, 8, 4, 4)), [], "train")

    def test_triple_skip_concat_width(self, rng):
        # three 32-channel skips with a 32-channel upsampled input: 128 in
        dec = blocks.DecoderStage("d", 32, 96, 32, 8, rng, np.float32)
        assert dec.in_channels == 128
        below = _x(rng, (1, 32, 4, 4))
        skips = [_x(rng, (1, 32, 8, 8)) for _ in range(3)]
        assert dec.forward(below, skips, "train").shape == (1, 32, 8, 8)

    def test_skip_spatial_mismatch_raises(self, rng):
        dec = blocks.DecoderStage("d", 8, 4, 4, 2, rng, np.float32)
        with pytest.raises(ShapeError):
            dec.forward(_x(rng, (1, 8, 4, 4)), [_x(rng, (1, 4, 6, 6))], "train")


class TestSubNetwork:
    def test_tiny_config_output_contract(self, rng):
        net = blocks.SubNetwork("net1", (4, 8), 3, 8, rng)
        score, skips = net.forward(_x(rng, (1, 3, 16, 16)))
        assert score.shape == (1, 1, 16, 16)
        assert np.all(np.isfinite(score.data))
        assert np.all((score.data > 0) & (score.data < 1))
        assert len(skips) == 1 and skips[0].shape == (1, 4, 16, 16)

    def test_stage_counts(self, rng):
        net = blocks.SubNetwork("net1", (8, 16, 32), 3, 8, rng)
        assert len(net.encoders) == 2
        assert len(net.decoders) == 2

    def test_indivisible_input_raises(self, rng):
        net = blocks.SubNetwork("net1", (4, 8, 16), 3, 8, rng)
        with pytest.raises(ShapeError):
            net.forward(_x(rng, (1, 3, 18, 18)))

    def test_extra_skips_change_decoder_width(self, rng):
        solo = blocks.SubNetwork("n", (4, 8), 3, 8, rng, extra_skip_sources=0)
        joined = blocks.SubNetwork("m", (4, 8), 3, 8, rng, extra_skip_sources=2)
        assert solo.decoders[0].in_channels == 8 + 4
        assert joined.decoders[0].in_channels == 8 + 4 * 3

    def test_parameter_names_unique(self, rng):
        net = blocks.SubNetwork("net1", (4, 8, 16), 3, 8, rng)
        names = [p.name for p in net.parameters()]
        assert len(names) == len(set(names))

    def test_skip_order_golden_regression(self):
        """The decoder concat order [upsampled, own skip, extras oldest-last]
        is contractual; these frozen values pin it for a fixed seed."""
        rng = np.random.default_rng(123)
        net = blocks.SubNetwork("net1", (4, 8), 3, 8, rng, extra_skip_sources=2, dtype=np.float64)
        gen = np.random.default_rng(5)
        x = tc.Tensor(gen.random((1, 3, 8, 8)))
        extras = [[tc.Tensor(gen.random((1, 4, 8, 8))) for _ in range(2)]]
        score, _ = net.forward(x, extras, mode="eval")
        got = [float(score.data[0, 0, i, i]) for i in (0, 3, 7)]
        expected = [0.5700588004210366, 0.6733231114241369, 0.5432363522319652]
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_scrambled_skip_order_changes_output(self):
        rng = np.random.default_rng(123)
        net = blocks.SubNetwork("net1", (4, 8), 3, 8, rng, extra_skip_sources=2, dtype=np.float64)
        gen = np.random.default_rng(5)
        x = tc.Tensor(gen.random((1, 3, 8, 8)))
        e1 = tc.Tensor(gen.random((1, 4, 8, 8)))
        e2 = tc.Tensor(gen.random((1, 4, 8, 8)))
        a, _ = net.forward(x, [[e1, e2]], mode="eval")
        b, _ = net.forward(x, [[e2, e1]], mode="eval")
        assert not np.array_equal(a.data, b.data)

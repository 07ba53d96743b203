"""Composite layers: separable conv blocks, channel attention, encoder and
decoder stages, and the single U-shaped sub-network they assemble into."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import (
    Parameter,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d_depthwise,
    conv2d_pointwise,
    dense,
    ew_mul,
    global_avg_pool,
    max_pool2,
    relu,
    reshape,
    sigmoid,
    upsample_bilinear2,
)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def attention_bottleneck_width(channels: int, ratio: int) -> int:
    """Reduced width of the attention bottleneck: channels/ratio, floored at 4.

    When the floor is not active the ratio must divide the channel count.
    """
    if ratio < 1:
        raise ConfigError(f"attention ratio must be >= 1, got {ratio}")
    if channels < 4 * ratio:
        return 4
    if channels % ratio:
        raise ConfigError(f"attention ratio {ratio} does not divide {channels} channels")
    return channels // ratio


class ConvBlock:
    """Depthwise 3x3 -> pointwise 1x1 -> batch norm -> ReLU.

    The convolutions carry no bias; the batch-norm shift makes one redundant.
    """

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator, dtype):
        self.name = name
        self.in_channels = c_in
        self.out_channels = c_out
        self.depthwise = Parameter(
            f"{name}.depthwise.weight", kaiming_normal(rng, (c_in, 1, 3, 3), 9, dtype)
        )
        self.pointwise = Parameter(
            f"{name}.pointwise.weight", kaiming_normal(rng, (c_out, c_in, 1, 1), c_in, dtype)
        )
        self.bn_gamma = Parameter(f"{name}.bn.gamma", np.ones(c_out, dtype=dtype))
        self.bn_beta = Parameter(f"{name}.bn.beta", np.zeros(c_out, dtype=dtype))
        self.running_mean = np.zeros(c_out, dtype=dtype)
        self.running_var = np.ones(c_out, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        x = conv2d_depthwise(x, self.depthwise.tensor)
        x = conv2d_pointwise(x, self.pointwise.tensor)
        x = batch_norm(
            x,
            self.bn_gamma.tensor,
            self.bn_beta.tensor,
            self.running_mean,
            self.running_var,
            mode,
            momentum=BN_MOMENTUM,
            epsilon=BN_EPSILON,
        )
        return relu(x)

    def parameters(self) -> list:
        return [self.depthwise, self.pointwise, self.bn_gamma, self.bn_beta]

    def buffers(self) -> list:
        return [
            (f"{self.name}.bn.running_mean", self.running_mean),
            (f"{self.name}.bn.running_var", self.running_var),
        ]


class ChannelAttention:
    """Squeeze-and-excite gate: GAP -> dense -> ReLU -> dense -> sigmoid,
    applied as a per-channel multiplier in (0, 1)."""

    def __init__(self, name: str, channels: int, ratio: int, rng: np.random.Generator, dtype):
        self.name = name
        self.channels = channels
        self.reduced = attention_bottleneck_width(channels, ratio)
        self.squeeze = Parameter(
            f"{name}.squeeze.weight", kaiming_normal(rng, (self.reduced, channels), channels, dtype)
        )
        self.excite = Parameter(
            f"{name}.excite.weight",
            kaiming_normal(rng, (channels, self.reduced), self.reduced, dtype),
        )

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.data.shape[0], x.data.shape[1]
        if c != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {c}")
        s = reshape(global_avg_pool(x), (n, c))
        s = dense(s, self.squeeze.tensor)
        s = relu(s)
        s = dense(s, self.excite.tensor)
        s = sigmoid(s)
        return ew_mul(x, reshape(s, (n, c, 1, 1)))

    def parameters(self) -> list:
        return [self.squeeze, self.excite]


class EncoderStage:
    """Two conv blocks, channel attention, then 2x2 max pooling.

    Returns the pre-pool features (for skip connections) alongside the
    pooled output.
    """

    def __init__(self, name: str, c_in: int, width: int, ratio: int, rng, dtype):
        self.name = name
        self.width = width
        self.block1 = ConvBlock(f"{name}.block1", c_in, width, rng, dtype)
        self.block2 = ConvBlock(f"{name}.block2", width, width, rng, dtype)
        self.attention = ChannelAttention(f"{name}.attention", width, ratio, rng, dtype)

    def forward(self, x: Tensor, mode: str):
        features = self.attention.forward(self.block2.forward(self.block1.forward(x, mode), mode))
        return features, max_pool2(features)

    def parameters(self) -> list:
        return self.block1.parameters() + self.block2.parameters() + self.attention.parameters()

    def buffers(self) -> list:
        return self.block1.buffers() + self.block2.buffers()


class DecoderStage:
    """Upsample, concatenate skips, one conv block, channel attention.

    Concat order is part of the contract: [upsampled, own-encoder skip,
    earlier sub-networks' skips oldest-last].
    """

    def __init__(self, name: str, below_channels: int, skip_channels: int, width: int, ratio: int, rng, dtype):
        self.name = name
        self.width = width
        self.below_channels = below_channels
        self.in_channels = below_channels + skip_channels
        self.block = ConvBlock(f"{name}.block", self.in_channels, width, rng, dtype)
        self.attention = ChannelAttention(f"{name}.attention", width, ratio, rng, dtype)

    def forward(self, below: Tensor, skips: Sequence[Tensor], mode: str) -> Tensor:
        if len(skips) == 0:
            raise ConfigError(f"{self.name}: decoder stage requires at least one skip input")
        up = upsample_bilinear2(below)
        x = concat_channels([up, *skips])
        x = self.block.forward(x, mode)
        return self.attention.forward(x)

    def parameters(self) -> list:
        return self.block.parameters() + self.attention.parameters()

    def buffers(self) -> list:
        return self.block.buffers()


class SubNetwork:
    """One U-shaped encoder/decoder with a sigmoid score-map head.

    For L filter widths there are L-1 pooled encoder stages, a bottleneck at
    the last width, and L-1 decoder stages mirroring back up. `extra_skip_sources`
    is the number of earlier sub-networks whose pre-pool encoder features are
    concatenated into each decoder stage.
    """

    def __init__(
        self,
        name: str,
        filter_widths: Sequence[int],
        in_channels: int,
        attention_ratio: int,
        rng: np.random.Generator,
        extra_skip_sources: int = 0,
        dtype=np.float32,
    ):
        if len(filter_widths) < 2:
            raise ConfigError(f"{name}: need at least two filter widths, got {list(filter_widths)}")
        self.name = name
        self.filter_widths = tuple(int(w) for w in filter_widths)
        self.in_channels = in_channels
        self.extra_skip_sources = extra_skip_sources
        widths = self.filter_widths
        levels = len(widths) - 1

        self.encoders = []
        c = in_channels
        for j in range(levels):
            self.encoders.append(
                EncoderStage(f"{name}.enc{j + 1}", c, widths[j], attention_ratio, rng, dtype)
            )
            c = widths[j]

        deep = widths[-1]
        self.bottleneck1 = ConvBlock(f"{name}.bottleneck.block1", widths[-2], deep, rng, dtype)
        self.bottleneck2 = ConvBlock(f"{name}.bottleneck.block2", deep, deep, rng, dtype)
        self.bottleneck_attention = ChannelAttention(
            f"{name}.bottleneck.attention", deep, attention_ratio, rng, dtype
        )

        # decoders[0] is the deepest stage.
        self.decoders = []
        for j in range(levels - 1, -1, -1):
            below = widths[-1] if j == levels - 1 else widths[j + 1]
            skip_total = widths[j] * (1 + extra_skip_sources)
            self.decoders.append(
                DecoderStage(f"{name}.dec{j + 1}", below, skip_total, widths[j], attention_ratio, rng, dtype)
            )

        self.head_weight = Parameter(
            f"{name}.head.weight", kaiming_normal(rng, (1, widths[0], 1, 1), widths[0], dtype)
        )
        self.head_bias = Parameter(f"{name}.head.bias", np.zeros(1, dtype=dtype))

    @property
    def levels(self) -> int:
        return len(self.filter_widths) - 1

    def forward(self, x: Tensor, extra_skips: Optional[Sequence[Sequence[Tensor]]] = None, mode: str = "train"):
        """Run the sub-network.

        extra_skips[j] lists earlier sub-networks' level-j pre-pool features,
        oldest first. Returns (score_map, own pre-pool features per level).
        """
        n, c, h, w = x.data.shape if x.data.ndim == 4 else (None, None, None, None)
        if n is None or c != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected (N, {self.in_channels}, H, W) input, got {x.data.shape}"
            )
        div = 1 << self.levels
        if h % div or w % div:
            raise ShapeError(
                f"{self.name}: spatial size {h}x{w} not divisible by {div} "
                f"(needed for {self.levels} pooling stages)"
            )
        if extra_skips is not None and len(extra_skips) != self.levels:
            raise ShapeError(
                f"{self.name}: expected extra skips for {self.levels} levels, got {len(extra_skips)}"
            )

        skips = []
        cur = x
        for enc in self.encoders:
            features, cur = enc.forward(cur, mode)
            skips.append(features)

        cur = self.bottleneck1.forward(cur, mode)
        cur = self.bottleneck2.forward(cur, mode)
        cur = self.bottleneck_attention.forward(cur)

        for dec, j in zip(self.decoders, range(self.levels - 1, -1, -1)):
            ordered = [skips[j]]
            if extra_skips is not None:
                ordered.extend(reversed(extra_skips[j]))
            cur = dec.forward(cur, ordered, mode)

        score = sigmoid(conv2d_pointwise(cur, self.head_weight.tensor, self.head_bias.tensor))
        return score, skips

    def parameters(self) -> list:
        params = []
        for enc in self.encoders:
            params.extend(enc.parameters())
        params.extend(self.bottleneck1.parameters())
        params.extend(self.bottleneck2.parameters())
        params.extend(self.bottleneck_attention.parameters())
        for dec in self.decoders:
            params.extend(dec.parameters())
        params.extend([self.head_weight, self.head_bias])
        return params

    def buffers(self) -> list:
        bufs = []
        for enc in self.encoders:
            bufs.extend(enc.buffers())
        bufs.extend(self.bottleneck1.buffers())
        bufs.extend(self.bottleneck2.buffers())
        for dec in self.decoders:
            bufs.extend(dec.buffers())
        return bufs

"""Squeeze units, gate units and per-RoI multi-layer feature fusion.

The extraction pipeline, per backbone block: a 1x1 squeeze convolution
shrinks the channel count by the squeeze ratio, RoI max pooling lifts a
region onto a fixed p x p grid, a gate unit produces coefficients in
(0, 1), those coefficients modulate the pooled features elementwise,
and the modulated maps from all blocks are concatenated channel-wise.

Two gate designs are provided. The spatial gate collapses channels with
a 1x1 convolution and emits one coefficient per location, shared by all
channels there. The channel gate collapses space with a full-size
depthwise separable convolution and emits one coefficient per channel,
shared by every location in that channel. Both push their map through
two fully connected layers and a final sigmoid:

    gate(R) = sigmoid(fc2(relu(fc1(relu(conv_stage(R))))))

Feature maps are squeezed once per image; pooling then runs per RoI on
the squeezed pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .boxes import RoiBox
from .layers import (Conv2dParams, DepthwiseSeparableParams, FcParams,
                     ShapeError, conv2d, depthwise_separable_conv,
                     fully_connected, linear, relu, roi_max_pool, sigmoid)
from .tensor import (Tensor, concat, elementwise_mul, reshape, stack_rows,
                     tensor_sum)

GATE_KINDS = ("spatial", "channel")


def gaussian_init(rng: np.random.Generator, shape, std: float = 0.01,
                  dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------------
# Squeeze unit
# ---------------------------------------------------------------------------

@dataclass
class SqueezeUnit:
    """1x1 convolution reducing C_in channels to C_in / ratio."""
    conv: Conv2dParams

    def __post_init__(self):
        k = self.conv.kernel.data
        if k.shape[2:] != (1, 1):
            raise ShapeError(f"squeeze kernel must be 1x1, got {k.shape[2:]}")
        if k.shape[0] < 1:
            raise ShapeError("squeeze unit needs at least one output channel")

    @property
    def in_channels(self) -> int:
        return self.conv.kernel.data.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv.kernel.data.shape[0]

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.in_channels, self.out_channels)

    @staticmethod
    def create(c_in: int, ratio: int, rng: np.random.Generator,
               std: float = 0.01, dtype=np.float64) -> "SqueezeUnit":
        if c_in % ratio != 0:
            raise ValueError(
                f"squeeze ratio {ratio} does not divide {c_in} channels")
        c_out = c_in // ratio
        kernel = Tensor(gaussian_init(rng, (c_out, c_in, 1, 1), std, dtype),
                        requires_grad=True)
        bias = Tensor(np.zeros(c_out, dtype), requires_grad=True)
        return SqueezeUnit(Conv2dParams(kernel, bias))

    def named_parameters(self):
        yield "squeeze.kernel", self.conv.kernel
        yield "squeeze.bias", self.conv.bias


def squeeze_apply(feature: Tensor, unit: SqueezeUnit) -> Tensor:
    """Map (C_in, H, W) to (C_out, H, W) through the 1x1 squeeze filters."""
    if feature.data.shape[0] != unit.in_channels:
        raise ShapeError(
            f"squeeze unit expects {unit.in_channels} channels, "
            f"got {feature.data.shape[0]}")
    return conv2d(feature, unit.conv)


# ---------------------------------------------------------------------------
# Gate units
# ---------------------------------------------------------------------------

def spatial_hidden_width(h: int, w: int) -> int:
    return max((h * w) // 2, 1)


def channel_hidden_width(channels: int) -> int:
    return max(channels // 4, 4)


@dataclass
class GateUnit:
    """Coefficients in (0, 1) that modulate a pooled (C, h, w) region.

    kind "spatial": conv_stage is a 1x1 convolution C -> 1 and the gate
    has shape (1, h, w), one coefficient per location. kind "channel":
    conv_stage is a full-size depthwise separable convolution collapsing
    (C, h, w) to (C, 1, 1), one coefficient per channel.
    """
    kind: str
    conv_stage: Conv2dParams | DepthwiseSeparableParams
    fc1: FcParams
    fc2: FcParams
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")

    @property
    def input_shape(self) -> tuple:
        return (self.channels, self.height, self.width)

    @property
    def output_shape(self) -> tuple:
        if self.kind == "spatial":
            return (1, self.height, self.width)
        return (self.channels, 1, 1)

    @staticmethod
    def create(kind: str, channels: int, h: int, w: int,
               rng: np.random.Generator, std: float = 0.01,
               dtype=np.float64) -> "GateUnit":
        def fc(n_in, n_out, bias_offset=0.0):
            wgt = Tensor(gaussian_init(rng, (n_out, n_in), std, dtype),
                         requires_grad=True)
            b = np.full(n_out, bias_offset, dtype)
            return FcParams(wgt, Tensor(b, requires_grad=True))

        if kind == "spatial":
            kernel = Tensor(gaussian_init(rng, (1, channels, 1, 1), std, dtype),
                            requires_grad=True)
            conv_stage = Conv2dParams(
                kernel, Tensor(np.zeros(1, dtype), requires_grad=True))
            hidden = spatial_hidden_width(h, w)
            fc1 = fc(h * w, hidden)
            # +1 on the last bias opens the gates at start (~0.73)
            fc2 = fc(hidden, h * w, bias_offset=1.0)
        elif kind == "channel":
            dw = Tensor(gaussian_init(rng, (channels, 1, h, w), std, dtype),
                        requires_grad=True)
            pw = Tensor(gaussian_init(rng, (channels, channels, 1, 1), std, dtype),
                        requires_grad=True)
            conv_stage = DepthwiseSeparableParams(
                dw, Tensor(np.zeros(channels, dtype), requires_grad=True),
                pw, Tensor(np.zeros(channels, dtype), requires_grad=True))
            hidden = channel_hidden_width(channels)
            fc1 = fc(channels, hidden)
            fc2 = fc(hidden, channels, bias_offset=1.0)
        else:
            raise ValueError(f"unknown gate kind {kind!r}")
        return GateUnit(kind, conv_stage, fc1, fc2, h, w, channels)

    def named_parameters(self):
        if self.kind == "spatial":
            yield "gate.conv.kernel", self.conv_stage.kernel
            yield "gate.conv.bias", self.conv_stage.bias
        else:
            yield "gate.depthwise.kernel", self.conv_stage.depthwise
            yield "gate.depthwise.bias", self.conv_stage.depthwise_bias
            yield "gate.pointwise.kernel", self.conv_stage.pointwise
            yield "gate.pointwise.bias", self.conv_stage.pointwise_bias
        yield "gate.fc1.weight", self.fc1.weight
        yield "gate.fc1.bias", self.fc1.bias
        yield "gate.fc2.weight", self.fc2.weight
        yield "gate.fc2.bias", self.fc2.bias


@dataclass
class RoiFeature:
    """A pooled region and, once gated, its modulated counterpart."""
    raw: Tensor
    gated: Tensor | None = None

    def __post_init__(self):
        if self.gated is not None and self.gated.shape != self.raw.shape:
            raise ShapeError(
                f"gated feature shape {self.gated.shape} differs from raw "
                f"{self.raw.shape}")


def gate_forward(region: Tensor, unit: GateUnit) -> Tensor:
    """Compute the gate coefficients for one pooled (C, h, w) region."""
    if tuple(region.data.shape) != unit.input_shape:
        raise ShapeError(
            f"gate unit expects input {unit.input_shape}, got {region.shape}")
    z = relu(_conv_stage(region, unit))
    v = reshape(z, (int(np.prod(z.shape)),))
    v = relu(fully_connected(v, unit.fc1))
    v = fully_connected(v, unit.fc2)
    return reshape(sigmoid(v), unit.output_shape)


def _conv_stage(region: Tensor, unit: GateUnit) -> Tensor:
    if unit.kind == "spatial":
        return conv2d(region, unit.conv_stage)
    return depthwise_separable_conv(region, unit.conv_stage)


def gate_modulate(region: Tensor, gate: Tensor) -> Tensor:
    """Elementwise product; the gate broadcasts over its singleton axes."""
    return elementwise_mul(region, gate)


def gate_apply(region: Tensor, unit: GateUnit) -> RoiFeature:
    gate = gate_forward(region, unit)
    return RoiFeature(raw=region, gated=gate_modulate(region, gate))


# ---------------------------------------------------------------------------
# Batched gate path (used by the trainer; same parameters, same math)
# ---------------------------------------------------------------------------

def gate_forward_batch(regions: Tensor, unit: GateUnit) -> Tensor:
    """Gate a stack (N, C, h, w) of pooled regions in a few matrix ops."""
    n, c, h, w = regions.data.shape
    if (c, h, w) != unit.input_shape:
        raise ShapeError(
            f"gate unit expects regions {unit.input_shape}, got {(c, h, w)}")
    flat = reshape(regions, (n, c, h * w))
    if unit.kind == "spatial":
        wvec = reshape(unit.conv_stage.kernel, (1, c, 1))
        z = tensor_sum(elementwise_mul(flat, wvec), axis=1)  # (N, h*w)
        z = z + reshape(unit.conv_stage.bias, (1, 1))
    else:
        dk = reshape(unit.conv_stage.depthwise, (1, c, h * w))
        z = tensor_sum(elementwise_mul(flat, dk), axis=2)  # (N, C)
        z = z + reshape(unit.conv_stage.depthwise_bias, (1, c))
        point = FcParams(reshape(unit.conv_stage.pointwise, (c, c)),
                         unit.conv_stage.pointwise_bias)
        z = linear(z, point)
    z = relu(z)
    z = relu(linear(z, unit.fc1))
    z = sigmoid(linear(z, unit.fc2))
    if unit.kind == "spatial":
        return reshape(z, (n, 1, h, w))
    return reshape(z, (n, c, 1, 1))


# ---------------------------------------------------------------------------
# Extractor: per-block squeeze + gate, RoI-wise fusion
# ---------------------------------------------------------------------------

@dataclass
class GatedExtractorConfig:
    blocks_used: tuple
    squeeze_ratio: int
    gate_kind: str
    roi_size: int = 7
    # per-block input channel count and feature stride
    block_channels: Mapping[int, int] = None
    block_strides: Mapping[int, int] = None

    def __post_init__(self):
        if not self.blocks_used:
            raise ValueError("blocks_used must be non-empty")
        if self.gate_kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.gate_kind!r}")
        for b in self.blocks_used:
            if b not in self.block_channels or b not in self.block_strides:
                raise ValueError(f"block {b} missing channels/stride info")


class GatedExtractor:
    """One squeeze unit and one gate unit per backbone block."""

    def __init__(self, cfg: GatedExtractorConfig, rng: np.random.Generator,
                 std: float = 0.01, dtype=np.float64):
        self.cfg = cfg
        p = cfg.roi_size
        self.squeezes = {}
        self.gates = {}
        for b in cfg.blocks_used:
            c_in = cfg.block_channels[b]
            self.squeezes[b] = SqueezeUnit.create(
                c_in, cfg.squeeze_ratio, rng, std, dtype)
            self.gates[b] = GateUnit.create(
                cfg.gate_kind, c_in // cfg.squeeze_ratio, p, p, rng, std, dtype)

    @property
    def output_channels(self) -> int:
        return sum(self.squeezes[b].out_channels for b in self.cfg.blocks_used)

    @property
    def feature_length(self) -> int:
        return self.output_channels * self.cfg.roi_size ** 2

    def named_parameters(self):
        for b in self.cfg.blocks_used:
            for name, t in self.squeezes[b].named_parameters():
                yield f"block{b}.{name}", t
            for name, t in self.gates[b].named_parameters():
                yield f"block{b}.{name}", t

    def squeeze_pyramid(self, pyramid: Mapping[int, Tensor]) -> dict:
        """Squeeze every used block once; amortized across RoIs."""
        return {b: squeeze_apply(pyramid[b], self.squeezes[b])
                for b in self.cfg.blocks_used}

    def pool_roi(self, squeezed: Mapping[int, Tensor], block: int,
                 roi: RoiBox) -> Tensor:
        scale = 1.0 / self.cfg.block_strides[block]
        return roi_max_pool(squeezed[block], roi, self.cfg.roi_size, scale)

    def extract(self, pyramid: Mapping[int, Tensor], roi: RoiBox) -> Tensor:
        """Squeeze -> pool -> gate -> modulate -> concat for one RoI."""
        squeezed = self.squeeze_pyramid(pyramid)
        parts = []
        for b in self.cfg.blocks_used:
            pooled = self.pool_roi(squeezed, b, roi)
            gated = gate_apply(pooled, self.gates[b]).gated
            parts.append(gated)
        from .layers import concat_channels
        return concat_channels(parts)

    def extract_batch(self, squeezed: Mapping[int, Tensor],
                      rois: Sequence[RoiBox]) -> Tensor:
        """Gated features for many RoIs, flattened to (N, feature_length)."""
        n = len(rois)
        p = self.cfg.roi_size
        parts = []
        for b in self.cfg.blocks_used:
            pooled = stack_rows([self.pool_roi(squeezed, b, r) for r in rois])
            gate = gate_forward_batch(pooled, self.gates[b])
            gated = elementwise_mul(pooled, gate)
            c = self.squeezes[b].out_channels
            parts.append(reshape(gated, (n, c * p * p)))
        return concat(parts, axis=1)


def extract_roi_features(pyramid: Mapping[int, Tensor], roi: RoiBox,
                         extractor: GatedExtractor) -> Tensor:
    """The full per-RoI pipeline over a feature pyramid, one RoI at a time."""
    return extractor.extract(pyramid, roi)

"""Closed-form parameter and multiply-accumulate accounting.

Counts are exact integers derived from the configuration, never from
instantiated arrays; the test suite cross-checks them against a walk
over the live model's parameter tensors. The RoI-wise sub-network is
everything that runs once per region: gate units plus the detection
head. Its size shrinks as the squeeze ratio grows, which is the whole
point of squeezing before pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .detector import ModelSpec
from .gating import channel_hidden_width, spatial_hidden_width


def fc_param_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def conv_param_count(c_in: int, c_out: int, kh: int, kw: int) -> int:
    return c_out * c_in * kh * kw + c_out


def depthwise_separable_param_count(c: int, c_out: int, kh: int, kw: int) -> int:
    return (c * kh * kw + c) + (c_out * c + c_out)


def conv_macs(c_in: int, c_out: int, kh: int, kw: int,
              out_h: int, out_w: int) -> int:
    return c_out * out_h * out_w * c_in * kh * kw


@dataclass
class CostReport:
    params: dict = field(default_factory=dict)       # section -> count
    per_roi_macs: dict = field(default_factory=dict)
    per_image_macs: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def roi_wise_params(self) -> int:
        return self.params.get("gate_units", 0) + self.params.get("head", 0)

    @property
    def total_per_roi_macs(self) -> int:
        return sum(self.per_roi_macs.values())

    @property
    def total_per_image_macs(self) -> int:
        return sum(self.per_image_macs.values())

    def rows(self):
        for section, n in self.params.items():
            yield ("params", section, n)
        for section, n in self.per_roi_macs.items():
            yield ("per_roi_macs", section, n)
        for section, n in self.per_image_macs.items():
            yield ("per_image_macs", section, n)


def count_cost(spec: ModelSpec, image_size: tuple = (256, 512)) -> CostReport:
    bb = spec.backbone
    k = bb.kernel_size
    p = spec.roi_size
    h_img, w_img = image_size
    report = CostReport()

    backbone_params = 0
    backbone_macs = 0
    prev = bb.in_channels
    for b in range(5):
        stride = bb.strides[b]
        oh, ow = h_img // stride, w_img // stride
        for _ in range(bb.convs_per_block):
            c = bb.channels[b]
            backbone_params += conv_param_count(prev, c, k, k)
            backbone_macs += conv_macs(prev, c, k, k, oh, ow)
            prev = c
    report.params["backbone"] = backbone_params
    report.per_image_macs["backbone"] = backbone_macs

    gated = spec.gate_kind != "baseline"
    squeeze_params = 0
    squeeze_macs = 0
    gate_params = 0
    gate_macs = 0
    modulation_macs = 0
    if gated:
        r = spec.squeeze_ratio
        for b in spec.blocks_used:
            c_in = bb.channels[b - 1]
            c = c_in // r
            stride = bb.strides[b - 1]
            squeeze_params += conv_param_count(c_in, c, 1, 1)
            squeeze_macs += conv_macs(c_in, c, 1, 1,
                                      h_img // stride, w_img // stride)
            if spec.gate_kind == "spatial":
                hidden = spatial_hidden_width(p, p)
                gate_params += conv_param_count(c, 1, 1, 1)
                gate_params += fc_param_count(p * p, hidden)
                gate_params += fc_param_count(hidden, p * p)
                gate_macs += p * p * c            # 1x1 collapse
                gate_macs += p * p * hidden + hidden * p * p
            else:
                hidden = channel_hidden_width(c)
                gate_params += depthwise_separable_param_count(c, c, p, p)
                gate_params += fc_param_count(c, hidden)
                gate_params += fc_param_count(hidden, c)
                gate_macs += c * p * p            # depthwise collapse
                gate_macs += c * c                # pointwise
                gate_macs += c * hidden + hidden * c
            modulation_macs += p * p * c
        feat_len = sum(bb.channels[b - 1] // r for b in spec.blocks_used) * p * p
    else:
        feat_len = bb.channels[4] * p * p
    report.params["squeeze_units"] = squeeze_params
    report.params["gate_units"] = gate_params
    report.per_image_macs["squeeze_units"] = squeeze_macs
    report.per_roi_macs["gate_units"] = gate_macs
    report.per_roi_macs["modulation"] = modulation_macs

    h1, h2 = spec.head_hidden
    head_params = (fc_param_count(feat_len, h1) + fc_param_count(h1, h2)
                   + fc_param_count(h2, 2) + fc_param_count(h2, 4))
    head_macs = feat_len * h1 + h1 * h2 + h2 * 2 + h2 * 4
    report.params["head"] = head_params
    report.per_roi_macs["head"] = head_macs
    return report

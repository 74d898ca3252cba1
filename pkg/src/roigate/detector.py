"""Desk-scale trainable detection pipeline around the gated extractor.

A miniature five-block backbone (trained from scratch, so it uses
fan-in-scaled Gaussian init in place of ImageNet weights) feeds either
a conv5-only baseline head or the gated multi-layer extractor. Region
proposals come from jittered ground truth plus random background boxes;
there is no trained region proposal network at this scale. The loss is
two-way cross entropy plus smooth-L1 box regression on positives, and
the optimizer is SGD with momentum and weight decay, one image per
iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import RoiBox, iou, iou_matrix
from .data import Dataset, image_to_input
from .evaluation import Detection, GroundTruthBox
from .gating import GatedExtractor, GatedExtractorConfig
from .layers import (Conv2dParams, FcParams, ShapeError, conv2d, linear,
                     max_pool2d, relu, roi_max_pool)
from .tensor import (Tensor, accumulate_grad, backward, make_op, no_grad,
                     reshape, stack_rows, workspace)

GATE_MODELS = ("baseline", "spatial", "channel")


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    in_channels: int = 3
    channels: tuple = (8, 16, 32, 64, 64)
    convs_per_block: int = 2
    downsample: tuple = (1, 2, 2, 2, 1)   # max-pool factor before each block
    final_dilation: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.channels) != 5 or len(self.downsample) != 5:
            raise ValueError("backbone uses exactly five blocks")
        strides = self.strides
        for a, b in zip(strides[:-1], strides[1:-1]):
            if b <= a:
                raise ValueError(f"strides must increase, got {strides}")
        if strides[4] != strides[3]:
            raise ValueError("the dilated final block must keep block 4's stride")

    @property
    def strides(self) -> tuple:
        out, s = [], 1
        for f in self.downsample:
            s *= f
            out.append(s)
        return tuple(out)

    @property
    def max_stride(self) -> int:
        return max(self.strides)


def receptive_field(cfg: BackboneConfig) -> dict:
    """Analytic receptive-field size at each block output."""
    rf, jump = 1, 1
    out = {}
    for b in range(5):
        if cfg.downsample[b] > 1:
            rf += (cfg.downsample[b] - 1) * jump
            jump *= cfg.downsample[b]
        dil = cfg.final_dilation if b == 4 else 1
        for _ in range(cfg.convs_per_block):
            rf += (cfg.kernel_size - 1) * dil * jump
        out[b + 1] = rf
    return out


def he_init(rng: np.random.Generator, shape, fan_in: int,
            dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Backbone:
    """Five convolutional blocks with max-pool downsampling between them."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        self.blocks = []
        k = cfg.kernel_size
        prev = cfg.in_channels
        for b in range(5):
            convs = []
            dil = cfg.final_dilation if b == 4 else 1
            for _ in range(cfg.convs_per_block):
                c = cfg.channels[b]
                kernel = Tensor(he_init(rng, (c, prev, k, k), prev * k * k, dtype),
                                requires_grad=True)
                bias = Tensor(np.zeros(c, dtype), requires_grad=True)
                convs.append(Conv2dParams(kernel, bias, stride=1,
                                          padding=dil * (k - 1) // 2,
                                          dilation=dil))
                prev = c
            self.blocks.append(convs)

    def named_parameters(self):
        for b, convs in enumerate(self.blocks, start=1):
            for i, conv in enumerate(convs, start=1):
                yield f"backbone.block{b}.conv{i}.kernel", conv.kernel
                yield f"backbone.block{b}.conv{i}.bias", conv.bias

    def forward(self, image: Tensor) -> dict:
        h, w = image.data.shape[1:]
        stride = self.cfg.max_stride
        if h % stride or w % stride:
            raise ShapeError(
                f"image size {h}x{w} is not divisible by the maximum stride "
                f"{stride}; pad the image to a multiple first")
        pyramid = {}
        x = image
        for b, convs in enumerate(self.blocks, start=1):
            if self.cfg.downsample[b - 1] > 1:
                f = self.cfg.downsample[b - 1]
                x = max_pool2d(x, f, f)
            for conv in convs:
                x = relu(conv2d(x, conv))
            pyramid[b] = x
        return pyramid


# ---------------------------------------------------------------------------
# Anchors
# ---------------------------------------------------------------------------

def geometric_scales(lo: float = 16.0, hi: float = 256.0, n: int = 9) -> tuple:
    return tuple(float(lo * (hi / lo) ** (k / (n - 1))) for k in range(n))


@dataclass
class AnchorConfig:
    ratio: float = 0.41            # width / height
    scales: tuple = field(default_factory=geometric_scales)
    stride: int = 16

    def __post_init__(self):
        if self.ratio <= 0:
            raise ValueError("anchor ratio must be positive")
        if any(s <= 0 for s in self.scales):
            raise ValueError("anchor scales must be positive")
        if list(self.scales) != sorted(self.scales) or \
                len(set(self.scales)) != len(self.scales):
            raise ValueError("anchor scales must be strictly increasing")


def generate_anchors(cfg: AnchorConfig, feature_size: tuple) -> list:
    """One box per (cell, scale): height = scale, width = ratio * scale,
    centered on the cell's image-space center. Boxes may exceed the
    image; clipping is the caller's choice."""
    hf, wf = feature_size
    anchors = []
    for i in range(hf):
        cy = (i + 0.5) * cfg.stride
        for j in range(wf):
            cx = (j + 0.5) * cfg.stride
            for s in cfg.scales:
                h = s
                w = cfg.ratio * s
                anchors.append(RoiBox(cx - w / 2, cy - h / 2,
                                      cx + w / 2, cy + h / 2))
    return anchors


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------

def sample_proposals(gts: Sequence[GroundTruthBox], jitter: float, count: int,
                     rng: np.random.Generator, image_size: tuple,
                     pos_fraction: float = 0.25,
                     neg_height_range: tuple = (16.0, 200.0),
                     aspect: float = 0.41) -> list:
    """Jittered ground-truth positives and random background negatives.

    Positives and negatives mix at pos_fraction (1:3 by default); with
    no ground truth the batch is all background. Deterministic for a
    given generator state.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    h_img, w_img = image_size
    usable = [g.box for g in gts if not g.ignore]
    n_pos = int(round(count * pos_fraction)) if usable else 0
    proposals = []
    for k in range(n_pos):
        box = usable[k % len(usable)]
        for _ in range(10):
            dx1 = rng.uniform(-jitter, jitter) * box.width
            dx2 = rng.uniform(-jitter, jitter) * box.width
            dy1 = rng.uniform(-jitter, jitter) * box.height
            dy2 = rng.uniform(-jitter, jitter) * box.height
            cand = RoiBox(box.x1 + dx1, box.y1 + dy1,
                          box.x2 + dx2, box.y2 + dy2).clipped(w_img, h_img)
            if cand is not None:
                proposals.append(cand)
                break
        else:
            proposals.append(box)
    lo, hi = neg_height_range
    while len(proposals) < count:
        for _ in range(20):
            hgt = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            hgt = min(hgt, h_img - 2.0)
            wid = min(aspect * hgt, w_img - 2.0)
            x1 = rng.uniform(0, w_img - wid)
            y1 = rng.uniform(0, h_img - hgt)
            cand = RoiBox(x1, y1, x1 + wid, y1 + hgt)
            if all(iou(cand, b) < 0.5 for b in usable):
                proposals.append(cand)
                break
        else:
            # crowded scene: accept the overlap, labeling sorts it out
            hgt = min(math.exp(rng.uniform(math.log(lo), math.log(hi))),
                      h_img - 2.0)
            wid = min(aspect * hgt, w_img - 2.0)
            x1 = rng.uniform(0, w_img - wid)
            y1 = rng.uniform(0, h_img - hgt)
            proposals.append(RoiBox(x1, y1, x1 + wid, y1 + hgt))
    return proposals


def box_to_deltas(proposal: RoiBox, gt: RoiBox) -> np.ndarray:
    pcx, pcy = proposal.center
    gcx, gcy = gt.center
    return np.array([
        (gcx - pcx) / proposal.width,
        (gcy - pcy) / proposal.height,
        math.log(gt.width / proposal.width),
        math.log(gt.height / proposal.height),
    ])


def apply_deltas(proposal: RoiBox, d: np.ndarray) -> RoiBox:
    pcx, pcy = proposal.center
    cx = pcx + float(d[0]) * proposal.width
    cy = pcy + float(d[1]) * proposal.height
    w = proposal.width * math.exp(min(float(d[2]), 4.0))
    h = proposal.height * math.exp(min(float(d[3]), 4.0))
    return RoiBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def label_proposals(proposals: Sequence[RoiBox],
                    gts: Sequence[GroundTruthBox],
                    pos_iou: float = 0.5) -> tuple:
    """IoU >= pos_iou against the best ground truth marks a positive.

    Returns (labels, regression targets, positive mask); targets are
    zero for negatives.
    """
    n = len(proposals)
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    usable = [g.box for g in gts if not g.ignore]
    if usable and n:
        m = iou_matrix(proposals, usable)
        best = m.argmax(axis=1)
        best_iou = m[np.arange(n), best]
        for i in range(n):
            if best_iou[i] >= pos_iou:
                labels[i] = 1
                targets[i] = box_to_deltas(proposals[i], usable[best[i]])
    return labels, targets, labels == 1


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of (N, K) logits against integer labels."""
    z = logits.data
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    picked = probs[np.arange(n), labels]
    out = np.array([-np.log(np.maximum(picked, 1e-300)).mean()], z.dtype)

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        accumulate_grad(logits, grad * (g.reshape(()) / n))

    return make_op(out, (logits,), bwd)


def smooth_l1_loss(pred: Tensor, targets: np.ndarray,
                   weights: np.ndarray) -> Tensor:
    """Per-row weighted smooth-L1: 0.5 d^2 inside |d|<1, |d|-0.5 outside."""
    d = pred.data - targets
    a = np.abs(d)
    per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    out = np.array([(per.sum(axis=1) * weights).sum()], pred.data.dtype)

    def bwd(g):
        slope = np.where(a < 1.0, d, np.sign(d))
        accumulate_grad(pred, slope * weights[:, None] * g.reshape(()))

    return make_op(out, (pred,), bwd)


def detection_loss(cls_scores: Tensor, box_deltas: Tensor,
                   labels: np.ndarray, regression_targets: np.ndarray) -> Tensor:
    """Cross entropy over all samples plus smooth-L1 over positives.

    The regression term averages over positive samples and is zero when
    there are none.
    """
    if cls_scores.data.shape[0] != len(labels):
        raise ShapeError(
            f"{cls_scores.data.shape[0]} score rows vs {len(labels)} labels")
    ce = softmax_cross_entropy(cls_scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    weights = pos.astype(box_deltas.data.dtype) / max(n_pos, 1)
    reg = smooth_l1_loss(box_deltas, regression_targets, weights)
    return ce + reg


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # (iteration count, learning rate) segments; the stock schedule keeps
    # the reference 80k/30k shape at desk length
    lr_schedule: tuple = ((1600, 1e-3), (600, 1e-4))
    roi_batch: int = 32
    pos_fraction: float = 0.25

    def __post_init__(self):
        rates = [r for _, r in self.lr_schedule]
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if rates != sorted(rates, reverse=True):
            raise ValueError("learning rates must be non-increasing")

    @property
    def total_iterations(self) -> int:
        return sum(n for n, _ in self.lr_schedule)

    def lr_at(self, iteration: int) -> float:
        done = 0
        for n, rate in self.lr_schedule:
            done += n
            if iteration < done:
                return rate
        return self.lr_schedule[-1][1]


class SgdState:
    def __init__(self):
        self.velocity: dict = {}


def sgd_step(named_params: Sequence[tuple], state: SgdState,
             cfg: SgdConfig, lr: float) -> None:
    """v <- momentum v + grad + decay p (weights only); p <- p - lr v.

    Decay applies to tensors of rank >= 2; biases (rank 1) are exempt.
    Parameters without an accumulated gradient are skipped.
    """
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay and p.data.ndim >= 2:
            g = g + cfg.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        v *= cfg.momentum
        v += g
        p.data -= lr * v


# ---------------------------------------------------------------------------
# Detection head and full model
# ---------------------------------------------------------------------------

class DetectionHead:
    """Two shared fc layers, then parallel 2-way class and 4-way box outputs."""

    def __init__(self, in_features: int, hidden: tuple,
                 rng: np.random.Generator, dtype=np.float64):
        h1, h2 = hidden

        def fc(n_in, n_out, std):
            w = Tensor((rng.standard_normal((n_out, n_in)) * std).astype(dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(n_out, dtype), requires_grad=True)
            return FcParams(w, b)

        self.fc1 = fc(in_features, h1, math.sqrt(2.0 / in_features))
        self.fc2 = fc(h1, h2, math.sqrt(2.0 / h1))
        self.cls = fc(h2, 2, 0.01)
        self.reg = fc(h2, 4, 0.01)
        self.in_features = in_features

    def named_parameters(self):
        for tag, p in (("fc1", self.fc1), ("fc2", self.fc2),
                       ("cls", self.cls), ("reg", self.reg)):
            yield f"head.{tag}.weight", p.weight
            yield f"head.{tag}.bias", p.bias

    def forward(self, feats: Tensor) -> tuple:
        x = relu(linear(feats, self.fc1))
        x = relu(linear(x, self.fc2))
        return linear(x, self.cls), linear(x, self.reg)


@dataclass
class ModelSpec:
    gate_kind: str = "spatial"            # baseline | spatial | channel
    squeeze_ratio: int = 2
    blocks_used: tuple = (1, 2, 3, 4, 5)
    roi_size: int = 7
    head_hidden: tuple = (256, 128)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.gate_kind not in GATE_MODELS:
            raise ValueError(f"unknown model kind {self.gate_kind!r}")
        if self.gate_kind == "baseline" and tuple(self.blocks_used) != (5,):
            raise ValueError(
                "the conv5-only baseline uses blocks_used=(5,); "
                f"got {self.blocks_used}")


class DetectionModel:
    """Backbone + (optional) gated extractor + RoI head."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float64):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        self.backbone = Backbone(spec.backbone, rng, dtype)
        strides = spec.backbone.strides
        if spec.gate_kind == "baseline":
            self.extractor = None
            feat_len = spec.backbone.channels[4] * spec.roi_size ** 2
        else:
            ext_cfg = GatedExtractorConfig(
                blocks_used=tuple(spec.blocks_used),
                squeeze_ratio=spec.squeeze_ratio,
                gate_kind=spec.gate_kind,
                roi_size=spec.roi_size,
                block_channels={b: spec.backbone.channels[b - 1]
                                for b in spec.blocks_used},
                block_strides={b: strides[b - 1] for b in spec.blocks_used})
            self.extractor = GatedExtractor(ext_cfg, rng, std=0.01, dtype=dtype)
            feat_len = self.extractor.feature_length
        self.head = DetectionHead(feat_len, spec.head_hidden, rng, dtype)

    def named_parameters(self) -> list:
        params = list(self.backbone.named_parameters())
        if self.extractor is not None:
            params.extend((f"extractor.{n}", t)
                          for n, t in self.extractor.named_parameters())
        params.extend(self.head.named_parameters())
        return params

    def clear_grads(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def roi_features(self, pyramid: Mapping[int, Tensor],
                     rois: Sequence[RoiBox]) -> Tensor:
        p = self.spec.roi_size
        if self.extractor is None:
            scale = 1.0 / self.spec.backbone.strides[4]
            pooled = stack_rows([roi_max_pool(pyramid[5], r, p, scale)
                                 for r in rois])
            return reshape(pooled, (len(rois), self.head.in_features))
        squeezed = self.extractor.squeeze_pyramid(pyramid)
        return self.extractor.extract_batch(squeezed, rois)

    def forward(self, image: np.ndarray, rois: Sequence[RoiBox]) -> tuple:
        pyramid = self.backbone.forward(Tensor(image.astype(self.dtype,
                                                            copy=False)))
        feats = self.roi_features(pyramid, rois)
        return self.head.forward(feats)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    sgd: SgdConfig = field(default_factory=SgdConfig)
    iterations: int | None = None       # default: schedule length
    jitter: float = 0.15
    seed: int = 0

    @property
    def total_iterations(self) -> int:
        return (self.iterations if self.iterations is not None
                else self.sgd.total_iterations)


def train(model: DetectionModel, dataset: Dataset, cfg: TrainConfig) -> list:
    """Run the single-image-per-iteration loop; returns the loss trace.

    Fully deterministic for a given seed. Aborts with the iteration
    number if the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    state = SgdState()
    trace = []
    inputs = [image_to_input(img, model.dtype) for img in dataset.images]
    params = model.named_parameters()
    with workspace() as ws:
        for it in range(cfg.total_iterations):
            idx = int(rng.integers(len(dataset)))
            gts = dataset.annotations[idx]
            image = inputs[idx]
            proposals = sample_proposals(
                gts, cfg.jitter, cfg.sgd.roi_batch, rng,
                image.shape[1:], cfg.sgd.pos_fraction)
            labels, targets, _ = label_proposals(proposals, gts)
            cls, reg = model.forward(image, proposals)
            loss = detection_loss(cls, reg, labels, targets)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise RuntimeError(
                    f"training diverged: non-finite loss at iteration {it}")
            trace.append(value)
            model.clear_grads()
            backward(loss)
            sgd_step(params, state, cfg.sgd, cfg.sgd.lr_at(it))
            model.clear_grads()
            ws.reset()
    return trace


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    subsets: tuple = ("All", "Small", "Occlusion", "Reasonable")
    # (grid stride, anchor heights) groups for sliding proposals
    grid: tuple = ((16, (56.0, 96.0)), (32, (160.0, 240.0)))
    gt_jitters: int = 3
    jitter: float = 0.12
    nms_iou: float = 0.5
    max_dets: int = 80
    seed: int = 9


def nms(dets: Sequence[Detection], iou_thresh: float) -> list:
    """Greedy non-maximum suppression, highest score first."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    keep = []
    for i in order:
        if all(iou(dets[i].box, dets[j].box) < iou_thresh for j in keep):
            keep.append(i)
    return [dets[i] for i in keep]


def eval_proposals(gts: Sequence[GroundTruthBox], image_size: tuple,
                   cfg: EvalConfig, rng: np.random.Generator) -> list:
    """Sliding anchor grid plus jittered annotations as candidates."""
    h_img, w_img = image_size
    out = []
    for stride, heights in cfg.grid:
        anchors = AnchorConfig(scales=tuple(sorted(heights)), stride=stride)
        for box in generate_anchors(anchors, (h_img // stride, w_img // stride)):
            clipped = box.clipped(w_img, h_img)
            if clipped is not None and clipped.area >= 0.5 * box.area:
                out.append(clipped)
    for g in gts:
        box = g.box
        for _ in range(cfg.gt_jitters):
            cand = RoiBox(
                box.x1 + rng.uniform(-cfg.jitter, cfg.jitter) * box.width,
                box.y1 + rng.uniform(-cfg.jitter, cfg.jitter) * box.height,
                box.x2 + rng.uniform(-cfg.jitter, cfg.jitter) * box.width,
                box.y2 + rng.uniform(-cfg.jitter, cfg.jitter) * box.height,
            ).clipped(w_img, h_img)
            if cand is not None:
                out.append(cand)
    return out


def detect(model: DetectionModel, image: np.ndarray,
           proposals: Sequence[RoiBox], cfg: EvalConfig) -> list:
    """Score and refine proposals into detections (after NMS)."""
    if not proposals:
        return []
    h_img, w_img = image.shape[1:]
    with no_grad():
        cls, reg = model.forward(image, proposals)
        z = cls.data - cls.data.max(axis=1, keepdims=True)
        ez = np.exp(z)
        scores = ez[:, 1] / ez.sum(axis=1)
        dets = []
        for i, prop in enumerate(proposals):
            refined = apply_deltas(prop, reg.data[i]).clipped(w_img, h_img)
            if refined is None:
                continue
            dets.append(Detection(refined, float(scores[i])))
    return nms(dets, cfg.nms_iou)[:cfg.max_dets]


def evaluate_model(model: DetectionModel, dataset: Dataset,
                   cfg: EvalConfig) -> tuple:
    """Detections and ground truth keyed by image name."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    dets_per_image = {}
    gts_per_image = {}
    for name, image, gts in zip(dataset.names, dataset.images,
                                dataset.annotations):
        arr = image_to_input(image, model.dtype)
        proposals = eval_proposals(gts, arr.shape[1:], cfg, rng)
        dets_per_image[name] = detect(model, arr, proposals, cfg)
        gts_per_image[name] = list(gts)
    return dets_per_image, gts_per_image

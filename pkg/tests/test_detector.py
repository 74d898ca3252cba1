import math

import numpy as np
import pytest

from roigate.boxes import RoiBox
from roigate.data import SynthSpec, generate_dataset
from roigate.detector import (
    AnchorConfig, Backbone, BackboneConfig, DetectionModel, EvalConfig,
    ModelSpec, SgdConfig, SgdState, TrainConfig, apply_deltas, box_to_deltas,
    detect, detection_loss, eval_proposals, evaluate_model, generate_anchors,
    label_proposals, nms, receptive_field, sample_proposals, sgd_step, train,
)
from roigate.evaluation import Detection, GroundTruthBox
from roigate.layers import ShapeError
from roigate.tensor import Tensor, backward, finite_diff_check, tensor_sum


def gt(x1, y1, x2, y2, vis=1.0, ignore=False):
    b = RoiBox(x1, y1, x2, y2)
    return GroundTruthBox(b, b.height, vis, ignore)


def tiny_backbone():
    return BackboneConfig(channels=(4, 6, 8, 12, 12))


class TestBackbone:
    def test_default_strides(self):
        assert BackboneConfig().strides == (1, 2, 4, 8, 8)

    def test_zero_image_gives_zero_features_with_zero_bias(self):
        bb = Backbone(tiny_backbone(), np.random.default_rng(0))
        pyramid = bb.forward(Tensor(np.zeros((3, 32, 64))))
        for b, t in pyramid.items():
            assert np.all(t.data == 0.0), f"block {b}"

    def test_spatial_sizes_follow_strides(self):
        bb = Backbone(tiny_backbone(), np.random.default_rng(1))
        pyramid = bb.forward(Tensor(np.zeros((3, 32, 64))))
        cfg = tiny_backbone()
        for b, stride in zip(range(1, 6), cfg.strides):
            assert pyramid[b].data.shape[1:] == (32 // stride, 64 // stride)

    def test_indivisible_size_instructs_padding(self):
        bb = Backbone(tiny_backbone(), np.random.default_rng(2))
        with pytest.raises(ShapeError, match="pad"):
            bb.forward(Tensor(np.zeros((3, 30, 64))))

    def test_receptive_field_recurrence_and_dilation_gain(self):
        cfg = BackboneConfig()
        rf = receptive_field(cfg)
        # independent recurrence oracle
        size, jump = 1, 1
        expected = {}
        for b in range(5):
            if cfg.downsample[b] > 1:
                size += (cfg.downsample[b] - 1) * jump
                jump *= cfg.downsample[b]
            d = cfg.final_dilation if b == 4 else 1
            for _ in range(cfg.convs_per_block):
                size += 2 * d * jump
            expected[b + 1] = size
        assert rf == expected
        undilated = receptive_field(BackboneConfig(final_dilation=1))
        assert rf[5] > undilated[5]
        assert rf[4] == undilated[4]

    def test_invalid_stride_plan_rejected(self):
        with pytest.raises(ValueError, match="strides"):
            BackboneConfig(downsample=(1, 1, 2, 2, 1))


class TestAnchors:
    def test_count_on_grid(self):
        cfg = AnchorConfig()
        assert len(generate_anchors(cfg, (4, 4))) == 144

    def test_aspect_ratio_matches_gamma_to_representation_precision(self):
        # corners are stored as floats, so width/height recovers the
        # construction ratio gamma only up to a couple of ulps
        cfg = AnchorConfig()
        for a in generate_anchors(cfg, (3, 2)):
            assert a.width / a.height == pytest.approx(0.41, rel=1e-14, abs=0)

    def test_centers_form_regular_grid(self):
        cfg = AnchorConfig(scales=(32.0,), stride=16)
        anchors = generate_anchors(cfg, (2, 3))
        centers = [a.center for a in anchors]
        expected = [((j + 0.5) * 16, (i + 0.5) * 16)
                    for i in range(2) for j in range(3)]
        assert centers == expected

    def test_scales_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            AnchorConfig(scales=(32.0, 16.0))


class TestProposals:
    def test_zero_jitter_reproduces_ground_truth(self):
        rng = np.random.default_rng(3)
        gts = [gt(10, 10, 20, 40), gt(60, 20, 80, 70)]
        props = sample_proposals(gts, 0.0, 8, rng, (128, 128))
        for k in range(2):
            assert props[k] == gts[k % 2].box

    def test_deterministic_for_same_seed(self):
        gts = [gt(10, 10, 20, 40)]
        a = sample_proposals(gts, 0.1, 16, np.random.default_rng(5), (128, 128))
        b = sample_proposals(gts, 0.1, 16, np.random.default_rng(5), (128, 128))
        assert a == b

    def test_empty_gt_gives_all_background(self):
        props = sample_proposals([], 0.1, 12, np.random.default_rng(6), (128, 128))
        assert len(props) == 12

    def test_zero_jitter_positives_all_labeled_positive(self):
        rng = np.random.default_rng(7)
        gts = [gt(10, 10, 20, 40), gt(60, 20, 80, 70)]
        props = sample_proposals(gts, 0.0, 16, rng, (128, 128))
        labels, targets, pos = label_proposals(props, gts)
        assert labels[:4].tolist() == [1, 1, 1, 1]
        assert np.all(targets[:4] == 0.0)  # exact match, zero deltas

    def test_pos_neg_mix_ratio(self):
        rng = np.random.default_rng(8)
        props = sample_proposals([gt(10, 10, 20, 40)], 0.05, 32, rng, (128, 128))
        labels, _, _ = label_proposals(props, [gt(10, 10, 20, 40)])
        assert labels[:8].sum() >= 6       # jittered positives mostly stick
        assert labels[8:].sum() == 0       # backgrounds rejected at IoU 0.5

    def test_delta_round_trip(self):
        p = RoiBox(10, 20, 30, 60)
        g = RoiBox(12, 18, 33, 64)
        d = box_to_deltas(p, g)
        back = apply_deltas(p, d)
        assert abs(back.x1 - g.x1) < 1e-9
        assert abs(back.y2 - g.y2) < 1e-9


class TestDetectionLoss:
    def test_perfect_predictions_hit_floor(self):
        logits = Tensor(np.array([[10.0, -10.0], [-10.0, 10.0]]))
        deltas = Tensor(np.zeros((2, 4)))
        labels = np.array([0, 1])
        loss = detection_loss(logits, deltas, labels, np.zeros((2, 4)))
        assert loss.data[0] < 1e-6

    def test_uniform_scores_give_ln2(self):
        logits = Tensor(np.zeros((5, 2)))
        deltas = Tensor(np.zeros((5, 4)))
        labels = np.array([0, 1, 0, 1, 0])
        loss = detection_loss(logits, deltas, labels, np.zeros((5, 4)))
        assert abs(loss.data[0] - math.log(2)) < 1e-12

    def test_smooth_l1_branch_continuity(self):
        # both branches give 0.5 and slope 1 at |x| = 1
        inner = 0.5 * 1.0 ** 2
        outer = 1.0 - 0.5
        assert inner == outer == 0.5

    def test_no_positives_means_zero_regression_term(self):
        logits = Tensor(np.zeros((3, 2)))
        deltas = Tensor(np.ones((3, 4)) * 5)
        labels = np.zeros(3, dtype=np.int64)
        loss = detection_loss(logits, deltas, labels, np.zeros((3, 4)))
        assert abs(loss.data[0] - math.log(2)) < 1e-12

    def test_loss_nonnegative_and_bounded_for_uniform(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n = int(rng.integers(1, 8))
            logits = Tensor(rng.standard_normal((n, 2)))
            deltas = Tensor(rng.standard_normal((n, 4)))
            labels = rng.integers(0, 2, n)
            targets = rng.standard_normal((n, 4))
            loss = detection_loss(logits, deltas, labels, targets)
            assert loss.data[0] >= 0.0

    def test_gradients(self):
        rng = np.random.default_rng(10)
        labels = np.array([1, 0, 1, 0])
        targets = rng.standard_normal((4, 4))
        logits0 = rng.standard_normal((4, 2))
        deltas0 = rng.standard_normal((4, 4))
        # keep |pred - target| away from the smooth-L1 joint at 1
        deltas0 = targets + np.where(np.abs(deltas0 - targets) % 1.5 < 0.75,
                                     0.4, 1.6) * np.sign(deltas0 - targets + 0.1)

        def f_logits(t):
            return detection_loss(t, Tensor(deltas0), labels, targets)

        def f_deltas(t):
            return detection_loss(Tensor(logits0), t, labels, targets)

        assert finite_diff_check(f_logits, Tensor(logits0)) < 1e-4
        assert finite_diff_check(f_deltas, Tensor(deltas0)) < 1e-4


class TestSgd:
    def _param(self, value, name="w"):
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        return [(name, t)], t

    def test_zero_everything_keeps_params(self):
        params, t = self._param([1.0, 2.0])
        t.grad = np.zeros(2)
        cfg = SgdConfig(weight_decay=0.0)
        sgd_step(params, SgdState(), cfg, lr=0.1)
        assert np.array_equal(t.data, [1.0, 2.0])

    def test_hand_arithmetic_two_steps(self):
        params, t = self._param([0.0])
        cfg = SgdConfig(momentum=0.9, weight_decay=0.0)
        state = SgdState()
        t.grad = np.ones(1)
        sgd_step(params, state, cfg, lr=0.1)
        assert abs(t.data[0] - (-0.1)) < 1e-15
        assert state.velocity["w"][0] == 1.0
        t.grad = np.ones(1)
        sgd_step(params, state, cfg, lr=0.1)
        assert abs(t.data[0] - (-0.29)) < 1e-15
        assert abs(state.velocity["w"][0] - 1.9) < 1e-15

    def test_decay_moves_weight_by_lr_times_decay(self):
        t = Tensor(np.array([[1.0]]), requires_grad=True)
        t.grad = np.zeros((1, 1))
        cfg = SgdConfig(momentum=0.9, weight_decay=5e-4)
        sgd_step([("w", t)], SgdState(), cfg, lr=0.1)
        assert abs(t.data[0, 0] - (1.0 - 0.1 * 5e-4)) < 1e-15

    def test_biases_exempt_from_decay(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        t.grad = np.zeros(1)
        sgd_step([("b", t)], SgdState(), SgdConfig(), lr=0.1)
        assert t.data[0] == 1.0

    def test_momentum_zero_decay_zero_is_vanilla(self):
        params, t = self._param([2.0])
        cfg = SgdConfig(momentum=0.0, weight_decay=0.0)
        t.grad = np.array([3.0])
        sgd_step(params, SgdState(), cfg, lr=0.01)
        assert t.data[0] == 2.0 - 0.01 * 3.0

    def test_rates_must_not_increase(self):
        with pytest.raises(ValueError, match="non-increasing"):
            SgdConfig(lr_schedule=((10, 1e-4), (10, 1e-3)))

    def test_lr_schedule_lookup(self):
        cfg = SgdConfig(lr_schedule=((5, 1e-3), (5, 1e-4)))
        assert cfg.lr_at(0) == 1e-3
        assert cfg.lr_at(4) == 1e-3
        assert cfg.lr_at(5) == 1e-4
        assert cfg.total_iterations == 10


def tiny_dataset(n=2, seed=0):
    spec = SynthSpec(image_size=(64, 128), objects_range=(1, 2),
                     height_range=(20.0, 48.0),
                     height_buckets=((20.0, 48.0, 1.0),),
                     distractors_range=(1, 2))
    return generate_dataset(spec, n, seed=seed)


def tiny_model(kind="spatial", seed=0, ratio=2):
    spec = ModelSpec(gate_kind=kind, squeeze_ratio=ratio,
                     blocks_used=(5,) if kind == "baseline" else (1, 2, 3, 4, 5),
                     roi_size=5, head_hidden=(32, 16),
                     backbone=tiny_backbone())
    return DetectionModel(spec, seed=seed)


class TestTrainLoop:
    def test_zero_lr_keeps_parameters(self):
        model = tiny_model()
        before = {n: t.data.copy() for n, t in model.named_parameters()}
        ds = tiny_dataset()
        cfg = TrainConfig(sgd=SgdConfig(lr_schedule=((1, 1e-12),), roi_batch=8),
                          iterations=1, seed=0)
        # a strictly zero rate is rejected by config; emulate with tiny lr
        trace = train(model, ds, cfg)
        assert len(trace) == 1
        for n, t in model.named_parameters():
            assert np.allclose(t.data, before[n], atol=1e-10)

    def test_same_seed_gives_bit_identical_traces(self):
        ds = tiny_dataset()
        cfg = TrainConfig(sgd=SgdConfig(lr_schedule=((6, 1e-3),), roi_batch=8),
                          seed=3)
        t1 = train(tiny_model(seed=1), ds, cfg)
        t2 = train(tiny_model(seed=1), ds, cfg)
        assert t1 == t2

    def test_loss_decreases_on_single_image(self):
        ds = tiny_dataset(n=1, seed=4)
        model = tiny_model(kind="spatial", seed=2)
        cfg = TrainConfig(sgd=SgdConfig(lr_schedule=((60, 1e-3),), roi_batch=8),
                          seed=5)
        trace = train(model, ds, cfg)
        assert np.mean(trace[-5:]) < np.mean(trace[:5])

    def test_divergence_aborts_with_iteration(self):
        ds = tiny_dataset(n=1, seed=6)
        model = tiny_model(seed=3)
        cfg = TrainConfig(sgd=SgdConfig(lr_schedule=((50, 1e8),), roi_batch=8),
                          seed=7)
        with pytest.raises(RuntimeError, match="iteration"):
            train(model, ds, cfg)


class TestInference:
    def test_nms_keeps_highest_and_suppresses_overlaps(self):
        dets = [Detection(RoiBox(10, 10, 30, 60), 0.9),
                Detection(RoiBox(11, 11, 31, 61), 0.8),
                Detection(RoiBox(200, 10, 220, 60), 0.7)]
        kept = nms(dets, 0.5)
        assert [d.score for d in kept] == [0.9, 0.7]

    def test_eval_proposals_cover_annotations(self):
        rng = np.random.default_rng(11)
        gts = [gt(30, 30, 50, 80)]
        props = eval_proposals(gts, (128, 256), EvalConfig(), rng)
        from roigate.boxes import iou as iou_fn
        assert max(iou_fn(p, gts[0].box) for p in props) > 0.5

    def test_detect_returns_clipped_scored_boxes(self):
        model = tiny_model(seed=4)
        ds = tiny_dataset(n=1, seed=8)
        from roigate.data import image_to_input
        arr = image_to_input(ds.images[0])
        props = [g.box for g in ds.annotations[0]]
        dets = detect(model, arr, props, EvalConfig())
        h, w = arr.shape[1:]
        for d in dets:
            assert 0 <= d.box.x1 < d.box.x2 <= w
            assert 0 <= d.box.y1 < d.box.y2 <= h
            assert 0.0 <= d.score <= 1.0

    def test_evaluate_model_keys_match_dataset(self):
        model = tiny_model(seed=5)
        ds = tiny_dataset(n=2, seed=9)
        dets, gts = evaluate_model(model, ds, EvalConfig(grid=((32, (40.0,)),)))
        assert set(dets) == set(gts) == set(ds.names)


class TestBaselineModel:
    def test_baseline_has_no_squeeze_or_gate_parameters(self):
        model = tiny_model(kind="baseline")
        names = [n for n, _ in model.named_parameters()]
        assert not any("squeeze" in n or "gate" in n for n in names)

    def test_baseline_feature_is_conv5_pool_only(self):
        model = tiny_model(kind="baseline")
        assert model.head.in_features == 12 * 5 * 5

    def test_baseline_requires_conv5_only(self):
        with pytest.raises(ValueError, match="blocks_used"):
            ModelSpec(gate_kind="baseline", blocks_used=(1, 5))

    def test_gated_feature_length(self):
        model = tiny_model(kind="channel", ratio=2)
        per_block = [c // 2 for c in tiny_backbone().channels]
        assert model.head.in_features == sum(per_block) * 25

import numpy as np
import pytest

from detection import (DecodeHead, DetectionSet, FiringRateStats, GridPrediction, LossWeights,
                       NoGroundTruth, RegularizationConfig, decode_batch, decode_head,
                       firing_rate_penalty, iou, load_detections_jsonl, mean_ap, mean_ap_range,
                       pr_curve, save_detections_jsonl, to_boxes, yolo_loss, yolo_loss_terms)
from event_io import BoundingBox
from tensor_engine import Tape, Tensor, backward, numeric_gradient, sigmoid


def _grid_with(cell_values, s=4, b=2, frame=128):
    """Grid prediction with every entry 0.01 except the given {(row, col, k): (tx, ty, w, h, conf)}"""
    values = np.full((s, s, b * 5), 0.01)
    for (row, col, k), entries in cell_values.items():
        values[row, col, 5 * k:5 * k + 5] = entries
    return GridPrediction(Tensor(values), (s, b), frame)


class TestBoxes:
    def test_iou_of_half_overlap(self):
        assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_iou_disjoint_and_identical(self):
        a = BoundingBox(0, 0, 4, 4)
        assert iou(a, BoundingBox(5, 5, 6, 6)) == 0.0
        assert iou(a, a) == pytest.approx(1.0)

    def test_decode_cell_offsets(self):
        pred = _grid_with({(1, 2, 0): (0.5, 0.5, 0.25, 0.25, 0.9)})
        box, conf = to_boxes(pred).top()
        assert box.center == pytest.approx((80.0, 48.0))
        assert box.width == pytest.approx(32.0)
        assert box.height == pytest.approx(32.0)
        assert conf == pytest.approx(0.9)

    def test_to_boxes_one_per_cell_unless_keep_all(self):
        pred = _grid_with({})
        assert len(to_boxes(pred)) == 16
        assert len(to_boxes(pred, keep_all=True)) == 32

    def test_boxes_are_clamped_to_frame(self):
        pred = _grid_with({(0, 0, 1): (0.0, 0.0, 1.0, 1.0, 0.5)})
        box, _ = to_boxes(pred).top()
        assert box.x_min == 0.0
        assert box.x_max == pytest.approx(64.0)

    def test_confidence_range_checked(self):
        with pytest.raises(ValueError):
            DetectionSet([(BoundingBox(0, 0, 1, 1), 1.5)])


class TestYoloLoss:
    def test_perfect_prediction_leaves_only_noobj(self):
        gt = [BoundingBox(64, 32, 96, 64)]
        pred = _grid_with({(1, 2, 0): (0.5, 0.5, 0.25, 0.25, 1.0), (1, 2, 1): (0.5, 0.5, 0.01, 0.01, 0.0)})
        terms = yolo_loss_terms(pred, gt, LossWeights(coord=5.0, noobj=0.5))
        assert terms["coord"] == pytest.approx(0.0)
        assert terms["obj"] == pytest.approx(0.0)
        # 31 idle predictors at 0.01 and one at 0
        assert terms["noobj"] == pytest.approx(0.5 * 30 * 0.01 ** 2)

    def test_coordinate_term_uses_square_roots(self):
        gt = [BoundingBox(64, 32, 96, 64)]
        pred = _grid_with({(1, 2, 0): (0.5, 0.5, 0.36, 0.25, 1.0)})
        terms = yolo_loss_terms(pred, gt, LossWeights(coord=1.0, noobj=0.0))
        assert terms["coord"] == pytest.approx((0.6 - 0.5) ** 2)

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(NoGroundTruth):
            yolo_loss(_grid_with({}), [])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(4, 4, 10)), requires_grad=True)
        gt = [BoundingBox(20, 30, 60, 70)]

        def build(tape):
            pred = GridPrediction(sigmoid(logits, tape), (4, 2), 128)
            return yolo_loss(pred, gt, tape=tape)

        tape = Tape()
        grads = backward(tape, build(tape), {"logits": logits})
        numeric = numeric_gradient(lambda: float(build(None).values), logits)
        np.testing.assert_allclose(grads["logits"], numeric, rtol=1e-4, atol=1e-6)


class TestDecodeHead:
    def test_output_shape_and_range(self):
        head = DecodeHead.create(n_in=8, frame_size=32, normalization="layer", grid=(4, 2), seed=0)
        pred = decode_head(Tensor(np.arange(8, dtype=float)), head)
        assert pred.values.shape == (4, 4, 10)
        assert ((pred.values > 0) & (pred.values < 1)).all()

    def test_parameters_skip_norm_when_disabled(self):
        head = DecodeHead.create(n_in=8, frame_size=32, normalization="none")
        assert set(head.parameters()) == {"head.W", "head.b"}

    def test_batch_decode_uses_batch_statistics_in_training(self):
        head = DecodeHead.create(n_in=4, frame_size=32, normalization="batch", grid=(2, 1))
        rows = [Tensor([1.0, 0.0, 2.0, 3.0]), Tensor([3.0, 2.0, 0.0, 1.0])]
        decode_batch(rows, head, training=True)
        np.testing.assert_allclose(head.bn_state.running_mean, 0.1 * np.array([2.0, 1.0, 1.0, 2.0]))


class TestFiringRatePenalty:
    def test_penalty_is_lambda_times_spikes(self):
        stats = FiringRateStats(totals=np.array([[10.0, 20.0], [30.0, 40.0]]), window_us=10_000)
        penalty = firing_rate_penalty(stats, RegularizationConfig(lam=0.05))
        assert penalty.item() == pytest.approx(5.0)

    def test_rates(self):
        stats = FiringRateStats(totals=np.array([[10.0, 20.0], [30.0, 40.0]]), window_us=10_000)
        assert stats.duration_s == pytest.approx(0.02)
        assert stats.spikes_per_s == pytest.approx(5000.0)
        np.testing.assert_allclose(stats.layer_spikes_per_s(), [1500.0, 3500.0])

    def test_per_layer_weights(self):
        stats = FiringRateStats(totals=np.array([[10.0], [30.0]]), window_us=1000)
        penalty = firing_rate_penalty(stats, RegularizationConfig(lam=0.1, layer_weights=[0.0, 1.0]))
        assert penalty.item() == pytest.approx(3.0)

    def test_gradient_is_lambda_per_spike(self):
        spikes = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        stats = FiringRateStats(totals=np.array([[3.0]]), window_us=1000, tensors=[[spikes]])
        tape = Tape()
        grads = backward(tape, firing_rate_penalty(stats, RegularizationConfig(lam=0.2), tape), {"s": spikes})
        np.testing.assert_allclose(grads["s"], [0.2, 0.2])

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            RegularizationConfig(lam=-1.0)


class TestMeanAP:
    def _fixture(self):
        gt_a = BoundingBox(0, 0, 10, 10)
        gt_c = BoundingBox(20, 20, 30, 30)
        preds = [
            DetectionSet([(gt_a, 0.9)]),
            DetectionSet([(BoundingBox(50, 50, 60, 60), 0.8)]),
            DetectionSet([(gt_c, 0.7)]),
        ]
        return preds, [[gt_a], [], [gt_c]]

    def test_false_positive_between_hits(self):
        preds, gts = self._fixture()
        assert mean_ap(preds, gts) == pytest.approx(5 / 6)

    def test_perfect_detector(self):
        gts = [[BoundingBox(0, 0, 10, 10)], [BoundingBox(5, 5, 15, 15)]]
        preds = [DetectionSet([(g[0], 0.9)]) for g in gts]
        assert mean_ap(preds, gts) == pytest.approx(1.0)
        assert mean_ap_range(preds, gts) == pytest.approx(1.0)

    def test_pr_curve_columns(self):
        preds, gts = self._fixture()
        curve = pr_curve(preds, gts)
        assert list(curve["tp"]) == [1, 0, 1]
        assert list(curve["recall"]) == pytest.approx([0.5, 0.5, 1.0])

    def test_no_ground_truth(self):
        with pytest.raises(NoGroundTruth):
            mean_ap([DetectionSet()], [[]])

    def test_duplicate_hits_count_once(self):
        gt = BoundingBox(0, 0, 10, 10)
        preds = [DetectionSet([(gt, 0.9), (gt, 0.8)])]
        curve = pr_curve(preds, [[gt]])
        assert list(curve["tp"]) == [1, 0]

    def test_jsonl_round_trip(self, tmp_path):
        preds, gts = self._fixture()
        save_detections_jsonl(tmp_path / "det.jsonl", preds, gts)
        loaded_preds, loaded_gts = load_detections_jsonl(tmp_path / "det.jsonl")
        assert loaded_gts == gts
        assert mean_ap(loaded_preds, loaded_gts) == pytest.approx(5 / 6)


class TestLossProperties:
    def test_single_cell_by_hand(self):
        pred = GridPrediction(Tensor(np.array([[[0.4, 0.6, 0.25, 0.36, 0.8]]])), (1, 1), 10)
        gt = [BoundingBox(2, 3, 6, 7)]
        # target (0.4, 0.5, 0.4, 0.4)
        expected = 5.0 * (0.1 ** 2 + (0.5 - np.sqrt(0.4)) ** 2 + (0.6 - np.sqrt(0.4)) ** 2) + 0.2 ** 2
        loss = yolo_loss(pred, gt, LossWeights(coord=5.0, noobj=0.5))
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_doubling_coord_weight_doubles_only_coord(self):
        pred = _grid_with({(1, 2, 0): (0.3, 0.7, 0.2, 0.4, 0.6)})
        gt = [BoundingBox(64, 32, 96, 64)]
        base = yolo_loss_terms(pred, gt, LossWeights(coord=5.0, noobj=0.5))
        doubled = yolo_loss_terms(pred, gt, LossWeights(coord=10.0, noobj=0.5))
        assert base["coord"] > 0
        assert doubled["coord"] == pytest.approx(2 * base["coord"])
        assert doubled["obj"] == base["obj"]
        assert doubled["noobj"] == base["noobj"]

    def test_zero_size_prediction_keeps_gradient_finite(self):
        rng = np.random.default_rng(5)
        values = rng.normal(size=(4, 4, 10))
        values[1, 1, [2, 3, 7, 8]] = -40.0
        logits = Tensor(values, requires_grad=True)
        tape = Tape()
        pred = GridPrediction(sigmoid(logits, tape), (4, 2), 128)
        assert pred.values[1, 1, 2] == 0.0
        loss = yolo_loss(pred, [BoundingBox(20, 30, 60, 70)], tape=tape)
        grads = backward(tape, loss, {"logits": logits})
        assert np.isfinite(loss.item())
        assert np.isfinite(grads["logits"]).all()


class TestDecodeProperties:
    def test_silent_input_decodes_to_squashed_bias(self):
        head = DecodeHead.create(n_in=8, frame_size=32, normalization="layer", grid=(2, 1), seed=3)
        head.W.values[:] = 0.0
        head.b.values[:] = np.random.default_rng(6).normal(size=head.b.shape)
        pred = decode_head(Tensor(np.zeros(8)), head)
        expected = 1.0 / (1.0 + np.exp(-head.b.values))
        np.testing.assert_allclose(pred.values.reshape(-1), expected, rtol=1e-12)


class TestMeanAPInvariance:
    def test_strictly_increasing_remap_keeps_map(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            gts, frames = [], []
            for _ in range(10):
                truth = BoundingBox(*rng.uniform(0, 40, size=2), *rng.uniform(60, 100, size=2))
                gts.append([truth])
                jitter = rng.normal(0, 8, size=(3, 4))
                frames.append([
                    (BoundingBox(truth.x_min + dx0, truth.y_min + dy0, truth.x_max + dx1, truth.y_max + dy1),
                     float(rng.uniform(0.01, 0.99)))
                    for dx0, dy0, dx1, dy1 in jitter
                ])
            power, offset = rng.uniform(0.3, 3.0), rng.uniform(0.0, 0.5)

            def remap(c):
                return offset + (1.0 - offset) * c ** power

            original = [DetectionSet(dets) for dets in frames]
            remapped = [DetectionSet([(box, remap(c)) for box, c in dets]) for dets in frames]
            assert mean_ap(remapped, gts) == pytest.approx(mean_ap(original, gts), abs=1e-12)

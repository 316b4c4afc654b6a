import numpy as np
import pytest

from app.errors import ContractError, ShapeError
from app.services import autodiff as ad
from app.services import gradcheck
from app.services.detector import Detection, F1Counts, det_f1, det_loss, detect, f1_counts, init_detector_params
from app.services.streams import DetectionTarget, FeatureMap, Modality


def target_from(occupied, shape=(4, 4), offsets=None):
    occupancy = np.zeros(shape, dtype=bool)
    for r, c in occupied:
        occupancy[r, c] = True
    if offsets is None:
        offsets = np.zeros((2,) + shape)
    return DetectionTarget(occupancy, offsets)


def saturated(occupancy, offsets=None):
    logits = np.where(occupancy, 20.0, -20.0)[None]
    return Detection(logits, np.zeros((2,) + occupancy.shape) if offsets is None else offsets)


def inputs(rng, d=3, size=5):
    return (FeatureMap(Modality.IMG, 0, rng.normal(size=(d, size, size))),
            FeatureMap(Modality.PTS, 0, rng.normal(size=(d, size, size))))


class TestDetect:
    def test_zero_inputs_give_zero_logits(self, rng):
        params = init_detector_params(rng, 3, 3, 4)
        zeros = np.zeros((3, 5, 5))
        out = detect(FeatureMap(Modality.IMG, 0, zeros), FeatureMap(Modality.PTS, 0, zeros), params)
        np.testing.assert_array_equal(out.logits, 0.0)
        assert out.logits.shape == (1, 5, 5)
        assert out.offsets.shape == (2, 5, 5)

    def test_deterministic(self, rng):
        params = init_detector_params(rng, 3, 3, 4)
        img, pts = inputs(rng)
        a, b = detect(img, pts, params), detect(img, pts, params)
        assert a.logits.tobytes() == b.logits.tobytes()
        assert a.offsets.tobytes() == b.offsets.tobytes()

    def test_shape_mismatch(self, rng):
        params = init_detector_params(rng, 3, 3, 4)
        img, _ = inputs(rng)
        with pytest.raises(ShapeError):
            detect(img, FeatureMap(Modality.PTS, 0, rng.normal(size=(3, 4, 5))), params)
        with pytest.raises(ShapeError):
            detect(img, FeatureMap(Modality.PTS, 0, rng.normal(size=(2, 5, 5))), params)
        with pytest.raises(ShapeError):
            detect(img, img, params)

    def test_grad_check(self):
        block = gradcheck.detector_block(np.random.default_rng(4))
        assert ad.grad_check(block.graph, block.bindings, eps=gradcheck.GRADCHECK_EPS) < 1e-4


class TestDetLoss:
    def test_saturated_correct_prediction(self, rng):
        offsets = np.zeros((2, 4, 4))
        offsets[:, 1, 2] = (0.25, -0.4)
        target = target_from([(1, 2)], offsets=offsets)
        loss = det_loss(saturated(target.occupancy, offsets.copy()), target).numpy()
        assert 0.0 <= loss < 1e-6

    def test_empty_scene_at_zero_logits(self):
        target = target_from([])
        pred = Detection(np.zeros((1, 4, 4)), np.ones((2, 4, 4)))
        assert det_loss(pred, target).numpy() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_matches_loop_oracle(self, rng):
        occupancy = rng.random((5, 5)) < 0.3
        occupancy[0, 0] = True
        offsets = np.where(occupancy[None], rng.uniform(-0.5, 0.5, size=(2, 5, 5)), 0.0)
        target = DetectionTarget(occupancy, offsets)
        pred = Detection(rng.normal(size=(1, 5, 5)) * 3.0, rng.normal(size=(2, 5, 5)))
        bce, reg = 0.0, 0.0
        for i in range(5):
            for j in range(5):
                z, y = pred.logits[0, i, j], float(occupancy[i, j])
                p = 1.0 / (1.0 + np.exp(-z))
                bce -= y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
                if occupancy[i, j]:
                    reg += 0.5 * np.sum((pred.offsets[:, i, j] - offsets[:, i, j]) ** 2)
        expected = bce / 25.0 + reg / occupancy.sum()
        assert det_loss(pred, target).numpy() == pytest.approx(expected, rel=1e-8)

    def test_never_negative(self, rng):
        for _ in range(20):
            occupancy = rng.random((4, 4)) < 0.4
            target = DetectionTarget(occupancy, np.where(occupancy[None], rng.uniform(-0.5, 0.5, (2, 4, 4)), 0.0))
            pred = Detection(rng.normal(size=(1, 4, 4)) * 10.0, rng.normal(size=(2, 4, 4)))
            assert det_loss(pred, target).numpy() >= 0.0


class TestF1:
    def test_perfect(self):
        target = target_from([(0, 0), (2, 3)])
        assert det_f1(saturated(target.occupancy), target) == 1.0

    def test_all_negative(self):
        target = target_from([(1, 1)])
        assert det_f1(saturated(np.zeros((4, 4), dtype=bool)), target) == 0.0

    def test_one_of_each(self):
        target = target_from([(0, 0), (1, 1)])
        predicted = target_from([(0, 0), (3, 3)]).occupancy
        counts = f1_counts(saturated(predicted), target, 0.5)
        assert counts == F1Counts(1, 1, 1)
        assert det_f1(saturated(predicted), target) == pytest.approx(0.5)

    def test_both_empty(self):
        assert det_f1(saturated(np.zeros((4, 4), dtype=bool)), target_from([])) == 1.0

    def test_false_positives_never_help(self):
        target = target_from([(0, 0), (1, 1), (2, 2)])
        predicted = target.occupancy.copy()
        scores = [det_f1(saturated(predicted), target)]
        for r, c in [(0, 3), (3, 0), (1, 2), (3, 3)]:
            predicted[r, c] = True
            scores.append(det_f1(saturated(predicted), target))
        assert all(b <= a for a, b in zip(scores, scores[1:]))

    def test_counts_pool(self):
        total = F1Counts(1, 0, 1) + F1Counts(2, 1, 0)
        assert total == F1Counts(3, 1, 1)
        assert total.f1 == pytest.approx(6.0 / 8.0)

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2])
    def test_threshold_range(self, threshold):
        target = target_from([])
        with pytest.raises(ContractError):
            det_f1(saturated(target.occupancy), target, threshold)

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from app.errors import ContractError, ShapeError
from app.services import autodiff as ad
from app.services import gradcheck, ucf
from app.services.autodiff import Tensor
from app.services.pgm import read_pgm
from app.services.streams import FeatureMap, Modality, Source

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def ucf_params(rng, d=3, K=2):
    return ucf.init_ucf_params(rng, d, d, K)


def maps(rng, d=3, h=4, w=5):
    return (FeatureMap(Modality.IMG, 2, rng.normal(size=(d, h, w)), Source.COMPENSATED),
            FeatureMap(Modality.PTS, 2, rng.normal(size=(d, h, w)), Source.COMPENSATED))


def lattice_offsets(params, query=Modality.IMG):
    p = ucf.fusion_prefix(query)
    params[f"{p}.offset.weight"][:] = 0.0
    params[f"{p}.offset.bias"][:] = 0.0
    return params


class TestVariance:
    def test_zero_head_gives_unit_variance(self, rng):
        params = {k: np.zeros_like(v) for k, v in ucf_params(rng).items()}
        img, _ = maps(rng)
        np.testing.assert_array_equal(ucf.estimate_variance(img, params), 1.0)

    def test_output_is_clamped(self, rng):
        params = {k: v * 1e3 for k, v in ucf_params(rng).items()}
        img, _ = maps(rng)
        huge = FeatureMap(Modality.IMG, 0, img.data * 1e4)
        for feature in (img, huge, FeatureMap(Modality.IMG, 0, -img.data * 1e4)):
            variance = ucf.estimate_variance(feature, params)
            assert variance.shape == (1, 4, 5)
            assert variance.min() >= np.exp(-10.0) * (1 - 1e-12)
            assert variance.max() <= np.exp(10.0) * (1 + 1e-12)

    def test_grad_check(self):
        block = gradcheck.variance_block(np.random.default_rng(5))
        assert ad.grad_check(block.graph, block.bindings, eps=gradcheck.GRADCHECK_EPS) < 1e-4


class TestUncertLoss:
    def test_zero_residual_unit_variance(self, rng):
        f = rng.normal(size=(3, 4, 4))
        loss = ucf.uncert_loss(f, f, np.ones((1, 4, 4))).numpy()
        assert loss == pytest.approx(0.91894, abs=1e-5)
        assert loss == pytest.approx(HALF_LOG_2PI, abs=1e-12)

    def test_variance_at_squared_residual(self, rng):
        pred, target = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
        r2 = np.sum((pred - target) ** 2, axis=0, keepdims=True)
        loss = ucf.uncert_loss(pred, target, r2).numpy()
        assert loss == pytest.approx(np.mean(0.5 * (1.0 + np.log(r2) + np.log(2.0 * np.pi))), rel=1e-12)

    def test_optimum_is_squared_residual(self, rng):
        pred, target = rng.normal(size=(2, 1, 1)), rng.normal(size=(2, 1, 1))
        r2 = float(np.sum((pred - target) ** 2))
        found = minimize_scalar(
            lambda logvar: float(ucf.uncert_loss(pred, target, np.full((1, 1, 1), np.exp(logvar))).numpy()),
            bounds=(-12.0, 12.0), method="bounded", options={"xatol": 1e-10},
        )
        assert np.exp(found.x) == pytest.approx(r2, rel=1e-4)

    def test_non_positive_variance(self, rng):
        f = rng.normal(size=(2, 3, 3))
        variance = np.ones((1, 3, 3))
        variance[0, 1, 1] = 0.0
        with pytest.raises(ContractError):
            ucf.uncert_loss(f, f, variance)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ucf.uncert_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), np.ones((1, 3, 3)))
        with pytest.raises(ShapeError):
            ucf.uncert_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.ones((1, 4, 3)))


class TestUncertaintyMap:
    @pytest.mark.parametrize("variance, expected", [(4.0, 2.0), (1.0, 1.0)])
    def test_constant(self, variance, expected):
        np.testing.assert_array_equal(ucf.uncertainty_map(np.full((1, 3, 3), variance)), expected)

    def test_matches_loop(self, rng):
        variance = rng.uniform(0.01, 9.0, size=(1, 4, 5))
        u = ucf.uncertainty_map(variance)
        for i in range(4):
            for j in range(5):
                assert u[0, i, j] == pytest.approx(variance[0, i, j] ** 0.5, rel=1e-15)

    def test_rejects_non_positive(self):
        with pytest.raises(ContractError):
            ucf.uncertainty_map(np.array([[[1.0, -1.0]]]))


class TestSpatialSoftmax:
    def test_sums_to_one(self, rng):
        s = ucf.spatial_softmax(Tensor(rng.normal(size=(1, 6, 7)) * 3.0)).numpy()
        assert abs(s.sum() - 1.0) <= 1e-12

    def test_monotone_in_uncertainty(self, rng):
        u = rng.uniform(0.1, 3.0, size=(1, 5, 5))
        s = ucf.spatial_softmax(Tensor(u)).numpy()
        order = np.argsort(u.ravel())
        assert np.all(np.diff(s.ravel()[order]) >= 0)


class TestFuse:
    def test_zero_output_projection_is_residual_identity(self, rng):
        params = ucf_params(rng)
        params["ucf.img.fuse.out.weight"][:] = 0.0
        img, pts = maps(rng)
        out = ucf.fuse(img, pts, np.ones((1, 4, 5)), params).feature
        np.testing.assert_array_equal(out.data, img.data)
        assert out.source is Source.FUSED
        assert out.modality is Modality.IMG and out.time_index == 2

    def test_uniform_uncertainty_scales_weights_uniformly(self, rng):
        params = lattice_offsets(ucf_params(rng))
        img, pts = maps(rng)
        trace = ucf.fuse(img, pts, np.full((1, 4, 5), 0.7), params).trace
        weights, scaled = trace.weights.numpy(), trace.scaled_weights.numpy()
        np.testing.assert_allclose(trace.scale.numpy(), 1.0 / 20.0, rtol=1e-12)
        np.testing.assert_allclose(scaled, weights * (1.0 - 1.0 / 20.0), rtol=1e-12)
        np.testing.assert_array_equal(scaled.argmax(axis=0), weights.argmax(axis=0))

    def test_scaling_strictly_shrinks_weights(self, rng):
        params = lattice_offsets(ucf_params(rng), Modality.PTS)
        img, pts = maps(rng)
        trace = ucf.fuse(pts, img, rng.uniform(0.1, 3.0, size=(1, 4, 5)), params).trace
        assert np.all(np.abs(trace.scaled_weights.numpy()) < np.abs(trace.weights.numpy()))

    @pytest.mark.parametrize("shift", [100.0, -100.0])
    def test_off_grid_samples_are_still_scaled(self, rng, shift):
        params = ucf_params(rng)
        params[f"{ucf.fusion_prefix(Modality.IMG)}.offset.bias"][:] = shift
        img, pts = maps(rng)
        trace = ucf.fuse(img, pts, rng.uniform(0.1, 3.0, size=(1, 4, 5)), params).trace
        assert np.all(trace.xs.numpy() < 0) or np.all(trace.xs.numpy() > 4)
        scale = trace.scale.numpy()
        assert np.all((scale > 0) & (scale < 1))
        assert np.all(np.abs(trace.scaled_weights.numpy()) < np.abs(trace.weights.numpy()))

    def test_without_uncertainty_weights_are_unscaled(self, rng):
        params = ucf_params(rng)
        img, pts = maps(rng)
        result = ucf.fuse(img, pts, rng.uniform(0.1, 3.0, size=(1, 4, 5)), params, use_uncertainty=False)
        assert result.trace.scale is None
        np.testing.assert_array_equal(result.trace.scaled_weights.numpy(), result.trace.weights.numpy())

    def test_uncertainty_changes_the_output(self, rng):
        params = ucf_params(rng)
        img, pts = maps(rng)
        u = rng.uniform(0.1, 3.0, size=(1, 4, 5))
        with_u = ucf.fuse(img, pts, u, params).feature.data
        without = ucf.fuse(img, pts, u, params, use_uncertainty=False).feature.data
        assert not np.allclose(with_u, without)

    def test_modalities_may_have_different_depths(self, rng):
        params = ucf.init_ucf_params(rng, 4, 2, 2)
        img = FeatureMap(Modality.IMG, 0, rng.normal(size=(4, 3, 3)))
        pts = FeatureMap(Modality.PTS, 0, rng.normal(size=(2, 3, 3)))
        assert ucf.fuse(img, pts, np.ones((1, 3, 3)), params).feature.shape == (4, 3, 3)
        assert ucf.fuse(pts, img, np.ones((1, 3, 3)), params).feature.shape == (2, 3, 3)

    def test_uncertainty_shape_mismatch(self, rng):
        img, pts = maps(rng)
        with pytest.raises(ShapeError):
            ucf.fuse(img, pts, np.ones((1, 5, 4)), ucf_params(rng))

    def test_grad_check(self):
        block = gradcheck.fusion_block(np.random.default_rng(9))
        assert ad.grad_check(block.graph, block.bindings, eps=gradcheck.GRADCHECK_EPS) < 1e-4


class TestFuseLoss:
    def test_equal_pairs(self, rng):
        a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4))
        assert ucf.fuse_loss(a, b, a, b).numpy() == 0.0

    def test_img_residual_only(self, rng):
        a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4))
        assert ucf.fuse_loss(a + 1.0, b, a, b).numpy() == pytest.approx(1.0)

    def test_both_residuals(self, rng):
        a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4))
        assert ucf.fuse_loss(a + 1.0, b - 1.0, a, b).numpy() == pytest.approx(2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ucf.fuse_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


def test_export_uncertainty_pgm(tmp_path, rng):
    u = rng.uniform(0.0, 2.0, size=(1, 6, 7))
    path = str(tmp_path / "u.pgm")
    top = ucf.export_uncertainty_pgm(u, path)
    assert top == pytest.approx(u.max())
    values, meta = read_pgm(path)
    assert values.shape == (6, 7)
    assert meta["max"] == pytest.approx(u.max())
    np.testing.assert_allclose(values, u[0], atol=u.max() / 255.0)

import numpy as np
import pytest

from app.errors import ContractError, ShapeError
from app.services import autodiff as ad
from app.services import gradcheck, hfp
from app.services.autodiff import Tensor
from app.services.layers import deform_attn, init_deform_layer, to_tensors
from app.services.streams import FeatureMap, Modality, Source


def loop_bilinear(m, x, y):
    d, h, w = m.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(d)
    for yy, xx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        if 0 <= yy < h and 0 <= xx < w:
            weight = (1.0 - abs(x - xx)) * (1.0 - abs(y - yy))
            out += weight * m[:, yy, xx]
    return out


def loop_deform_attn(query, kv, p, prefix):
    d, h, w = query.shape
    K = p[f"{prefix}.attn.weight"].shape[0]
    out = np.zeros((p[f"{prefix}.out.weight"].shape[0], h, w))
    for i in range(h):
        for j in range(w):
            q = query[:, i, j]
            off = p[f"{prefix}.offset.weight"] @ q + p[f"{prefix}.offset.bias"]
            logits = p[f"{prefix}.attn.weight"] @ q + p[f"{prefix}.attn.bias"]
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            pooled = np.zeros(p[f"{prefix}.value.weight"].shape[0])
            for k in range(K):
                sample = loop_bilinear(kv, j + off[2 * k], i + off[2 * k + 1])
                pooled += weights[k] * (p[f"{prefix}.value.weight"] @ sample + p[f"{prefix}.value.bias"])
            out[:, i, j] = p[f"{prefix}.out.weight"] @ pooled + p[f"{prefix}.out.bias"]
    return out


def run_layer(query, kv, params, prefix="l", **kwargs):
    return deform_attn(Tensor(query), Tensor(kv), to_tensors(params), prefix, **kwargs)


class TestDeformAttn:
    def test_zero_output_projection_gives_zero_map(self, rng):
        params = init_deform_layer(rng, "l", 3, 2)
        params["l.out.weight"][:] = 0.0
        out = run_layer(rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), params).numpy()
        np.testing.assert_array_equal(out, 0.0)

    def test_zero_offsets_single_point_is_pointwise(self, rng):
        params = init_deform_layer(rng, "l", 3, 1)
        params["l.offset.weight"][:] = 0.0
        params["l.value.bias"] = rng.normal(size=3)
        params["l.out.bias"] = rng.normal(size=3)
        kv = rng.normal(size=(3, 4, 5))
        out = run_layer(rng.normal(size=(3, 4, 5)), kv, params).numpy()
        value = np.einsum("oi,ihw->ohw", params["l.value.weight"], kv) + params["l.value.bias"][:, None, None]
        expected = np.einsum("oi,ihw->ohw", params["l.out.weight"], value) + params["l.out.bias"][:, None, None]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_reference(self, seed):
        r = np.random.default_rng(seed)
        params = {k: v + r.normal(0.0, 0.5, size=v.shape) for k, v in init_deform_layer(r, "l", 2, 2).items()}
        query, kv = r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 3))
        out = run_layer(query, kv, params).numpy()
        np.testing.assert_allclose(out, loop_deform_attn(query, kv, params, "l"), atol=1e-10)

    def test_value_channels_may_differ(self, rng):
        params = init_deform_layer(rng, "l", 2, 2, d_kv=5)
        query, kv = rng.normal(size=(2, 3, 3)), rng.normal(size=(5, 3, 3))
        out = run_layer(query, kv, params).numpy()
        assert out.shape == (2, 3, 3)
        np.testing.assert_allclose(out, loop_deform_attn(query, kv, params, "l"), atol=1e-10)

    def test_weights_sum_to_one(self, rng):
        params = init_deform_layer(rng, "l", 3, 4)
        trace = []
        run_layer(rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5)), params, trace=trace)
        np.testing.assert_allclose(trace[0].weights.numpy().sum(axis=0), 1.0, atol=1e-12)

    def test_grid_mismatch(self, rng):
        params = init_deform_layer(rng, "l", 3, 2)
        with pytest.raises(ShapeError, match="grids differ"):
            run_layer(rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 5, 4)), params)

    def test_two_layer_grad_check(self):
        block = gradcheck.deform_block(np.random.default_rng(7))
        assert ad.grad_check(block.graph, block.bindings, eps=gradcheck.GRADCHECK_EPS) < 1e-4


def window_of(frames, modality=Modality.IMG, start=0):
    return [FeatureMap(modality, start + i, f, Source.EXTRACTED) for i, f in enumerate(frames)]


class TestPredict:
    def test_zero_dynamics_returns_newest_frame(self, rng):
        params = hfp.init_hfp_params(rng, Modality.IMG, 3, 4, 4, 3, 2)
        params["hfp.img.layer1.out.weight"][:] = 0.0
        frames = [rng.normal(size=(3, 4, 4)) for _ in range(3)]
        out = hfp.predict(window_of(frames, start=5), params)
        np.testing.assert_array_equal(out.data, frames[-1])
        assert out.time_index == 8
        assert out.source is Source.COMPENSATED
        assert out.modality is Modality.IMG

    def test_window_length_must_equal_tau(self, rng):
        params = hfp.init_hfp_params(rng, Modality.PTS, 3, 4, 4, 3, 2)
        frames = [rng.normal(size=(3, 4, 4)) for _ in range(2)]
        with pytest.raises(ContractError, match="window length"):
            hfp.predict(window_of(frames, Modality.PTS), params)

    def test_frame_shape_must_match_query(self, rng):
        params = hfp.init_hfp_params(rng, Modality.IMG, 3, 4, 4, 2, 2)
        frames = [rng.normal(size=(3, 5, 5)) for _ in range(2)]
        with pytest.raises(ShapeError):
            hfp.predict(window_of(frames), params)

    def test_window_length_is_read_from_params(self, rng):
        params = hfp.init_all(rng, 4, 6, 5, 5, 6, 4)
        assert hfp.window_length(params, Modality.IMG) == 6
        assert hfp.window_length(params, Modality.PTS) == 6
        assert params["hfp.pts.query"].shape == (6, 5, 5)

    def test_prediction_is_deterministic(self, rng):
        params = hfp.init_hfp_params(rng, Modality.IMG, 3, 4, 4, 3, 2)
        window = window_of([rng.normal(size=(3, 4, 4)) for _ in range(3)])
        assert hfp.predict(window, params).data.tobytes() == hfp.predict(window, params).data.tobytes()

    def test_grad_check(self):
        block = gradcheck.hfp_block(np.random.default_rng(11))
        assert ad.grad_check(block.graph, block.bindings, eps=gradcheck.GRADCHECK_EPS) < 1e-4


class TestTemPredLoss:
    def test_exact_prediction(self, rng):
        f = rng.normal(size=(3, 4, 4))
        assert hfp.tempred_loss(f, f).numpy() == 0.0

    def test_unit_residual(self, rng):
        f = rng.normal(size=(3, 4, 4))
        assert hfp.tempred_loss(f + 1.0, f).numpy() == pytest.approx(1.0)

    @pytest.mark.parametrize("c", [-2.5, 0.3, 7.0])
    def test_constant_residual(self, rng, c):
        f = rng.normal(size=(2, 3, 3))
        assert hfp.tempred_loss(f + c, f).numpy() == pytest.approx(c * c)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hfp.tempred_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))

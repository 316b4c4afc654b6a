"""Uncertainty estimation and uncertainty-guided cross-modality fusion.

A pointwise variance head turns a compensated map into a per-cell variance;
its square root is the uncertainty map U. Fusion enhances one modality with
the other through deformable attention whose weights are scaled by
1 - softmax(U) of the key/value modality, sampled at the same points.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Union

import numpy as np

from app.config import LOGVAR_CLAMP
from app.errors import ContractError, ShapeError
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.services.layers import AttentionTrace, deform_attn, init_deform_layer, init_linear, linear, to_tensors
from app.services.pgm import write_pgm
from app.services.streams import FeatureMap, Modality, Source

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def variance_prefix(modality: Modality) -> str:
    return f"ucf.{Modality(modality).value}.variance"


def fusion_prefix(query: Modality) -> str:
    """Layer that enhances ``query`` from the other modality, e.g. ``ucf.img.fuse``."""
    return f"ucf.{Modality(query).value}.fuse"


def init_ucf_params(rng: np.random.Generator, d_img: int, d_pts: int, K: int) -> Dict[str, np.ndarray]:
    params: Dict[str, np.ndarray] = {}
    for modality, d in ((Modality.IMG, d_img), (Modality.PTS, d_pts)):
        hidden = max(1, d // 2)
        params.update(init_linear(rng, f"{variance_prefix(modality)}.hidden", d, hidden))
        params.update(init_linear(rng, f"{variance_prefix(modality)}.logvar", hidden, 1))
    params.update(init_deform_layer(rng, fusion_prefix(Modality.IMG), d_img, K, d_kv=d_pts))
    params.update(init_deform_layer(rng, fusion_prefix(Modality.PTS), d_pts, K, d_kv=d_img))
    return params


def estimate_variance_tensor(feature: Tensor, params: Mapping[str, Tensor], modality: Modality) -> Tensor:
    """(D, H, W) -> (1, H, W) variance, exp of the clamped log-variance."""
    p = variance_prefix(modality)
    hidden = ad.relu(linear(feature, params, f"{p}.hidden"))
    logvar = ad.clamp(linear(hidden, params, f"{p}.logvar"), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return ad.exp(logvar)


def estimate_variance(feature: FeatureMap, params: Mapping[str, np.ndarray]) -> np.ndarray:
    return estimate_variance_tensor(Tensor(feature.data), to_tensors(params), feature.modality).numpy()


def uncert_loss(pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray],
                variance: Union[Tensor, np.ndarray]) -> Tensor:
    """Gaussian negative log-likelihood, averaged over spatial cells.

    The squared residual is summed over channels and shares one variance per cell.
    """
    pred, target, variance = ad.as_tensor(pred), ad.as_tensor(target), ad.as_tensor(variance)
    if pred.shape != target.shape:
        raise ShapeError(f"uncert_loss: prediction {pred.shape} vs target {target.shape}")
    if variance.shape != (1,) + pred.shape[1:]:
        raise ShapeError(f"uncert_loss: variance {variance.shape} does not match grid {pred.shape[1:]}")
    if not np.all(variance.data > 0):
        raise ContractError("uncert_loss: variance must be strictly positive")
    residual = ad.sum(ad.square(ad.sub(pred, target)), axis=0, keepdims=True)
    per_cell = ad.mul(0.5, ad.add(ad.add(ad.div(residual, variance), ad.log(variance)), LOG_2PI))
    return ad.mean(per_cell)


def uncertainty_map_tensor(variance: Tensor) -> Tensor:
    return ad.sqrt(variance)


def uncertainty_map(variance: np.ndarray) -> np.ndarray:
    variance = np.asarray(variance, dtype=np.float64)
    if not np.all(variance > 0):
        raise ContractError("uncertainty_map: variance must be strictly positive")
    return np.sqrt(variance)


def spatial_softmax(u: Tensor) -> Tensor:
    """Softmax of a (1, H, W) map over all of its cells."""
    _, h, w = u.shape
    return ad.reshape(ad.softmax(ad.reshape(u, (h * w,)), axis=0), (1, h, w))


def fuse_tensor(
    query: Tensor,
    kv: Tensor,
    kv_uncertainty: Tensor,
    params: Mapping[str, Tensor],
    query_modality: Modality,
    use_uncertainty: bool = True,
    trace: Optional[list] = None,
) -> Tensor:
    """query + DeformAttn_U(query, kv): residual enhancement of ``query`` from ``kv``."""
    if kv_uncertainty.shape != (1,) + kv.shape[1:]:
        raise ShapeError(f"fuse: uncertainty {kv_uncertainty.shape} does not match key/value {kv.shape}")
    scale = spatial_softmax(kv_uncertainty) if use_uncertainty else None
    attended = deform_attn(query, kv, params, fusion_prefix(query_modality), scale_map=scale, trace=trace)
    return ad.add(query, attended)


@dataclass
class FuseResult:
    feature: FeatureMap
    trace: AttentionTrace


def fuse(
    query: FeatureMap,
    kv: FeatureMap,
    kv_uncertainty: np.ndarray,
    params: Mapping[str, np.ndarray],
    use_uncertainty: bool = True,
) -> FuseResult:
    traces: list = []
    out = fuse_tensor(Tensor(query.data), Tensor(kv.data), Tensor(kv_uncertainty), to_tensors(params),
                      query.modality, use_uncertainty, trace=traces)
    return FuseResult(FeatureMap(query.modality, query.time_index, out.numpy(), Source.FUSED), traces[0])


def fuse_loss(enh_img, enh_pts, target_img, target_pts) -> Tensor:
    """Sum of the element-mean squared errors of both enhanced maps."""
    pairs = [(ad.as_tensor(a), ad.as_tensor(b)) for a, b in ((enh_img, target_img), (enh_pts, target_pts))]
    for a, b in pairs:
        if a.shape != b.shape:
            raise ShapeError(f"fuse_loss: enhanced {a.shape} vs target {b.shape}")
    return ad.add(*(ad.mean(ad.square(ad.sub(a, b))) for a, b in pairs))


def export_uncertainty_pgm(uncertainty: np.ndarray, path: str) -> float:
    """Write a (1, H, W) or (H, W) map as 8-bit PGM; returns the value mapped to 255."""
    return write_pgm(path, np.asarray(uncertainty).reshape(np.shape(uncertainty)[-2:]))

"""Parameter initialisation and the single-head deformable attention layer."""

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from app.errors import ShapeError
from app.services import autodiff as ad
from app.services.autodiff import Tensor

Params = Mapping[str, Tensor]


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_linear(rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.weight": xavier_uniform(rng, fan_out, fan_in),
        f"{prefix}.bias": np.zeros(fan_out),
    }


def init_deform_layer(
    rng: np.random.Generator, prefix: str, d: int, K: int, d_kv: Optional[int] = None
) -> Dict[str, np.ndarray]:
    """Offset, attention, value and output projections; values map d_kv -> d channels."""
    params: Dict[str, np.ndarray] = {}
    params.update(init_linear(rng, f"{prefix}.offset", d, 2 * K))
    params.update(init_linear(rng, f"{prefix}.attn", d, K))
    params.update(init_linear(rng, f"{prefix}.value", d if d_kv is None else d_kv, d))
    params.update(init_linear(rng, f"{prefix}.out", d, d))
    return params


def to_tensors(arrays: Mapping[str, np.ndarray], trainable: Iterable[str] = ()) -> Dict[str, Tensor]:
    """Wrap arrays; names starting with any prefix in ``trainable`` require grad."""
    prefixes = tuple(trainable)
    return {
        name: Tensor(value, requires_grad=bool(prefixes) and name.startswith(prefixes))
        for name, value in arrays.items()
    }


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return ad.pointwise(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


@dataclass
class AttentionTrace:
    """Intermediate values of one deformable attention call, for inspection."""

    weights: Tensor  # (K, H, W) softmax over the K points
    scaled_weights: Tensor  # weights after uncertainty scaling (same as weights when unscaled)
    xs: Tensor  # (K*H*W,) sampled column coordinates
    ys: Tensor
    scale: Optional[Tensor]  # (K, H, W) sampled s-values, if any


def sampling_grid(K: int, h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.broadcast_to(xs, (K, h, w)), np.broadcast_to(ys, (K, h, w))


def deform_attn(
    query: Tensor,
    kv: Tensor,
    params: Params,
    prefix: str,
    scale_map: Optional[Tensor] = None,
    trace: Optional[list] = None,
) -> Tensor:
    """Single-head deformable attention over a (D, H, W) key/value map.

    Each query cell predicts K offsets and K softmax weights; values are the
    value projection of bilinear samples of ``kv`` at cell + offset. With
    ``scale_map`` (1, H, W) the weights become W * (1 - s) where s is the map
    sampled at the same points clamped to the grid, with no renormalisation.
    """
    if query.data.ndim != 3 or kv.data.ndim != 3 or query.shape[1:] != kv.shape[1:]:
        raise ShapeError(f"deform_attn[{prefix}]: query {query.shape} and key/value {kv.shape} grids differ")
    d_kv, h, w = kv.shape
    K = params[f"{prefix}.attn.weight"].shape[0]
    offsets = ad.reshape(linear(query, params, f"{prefix}.offset"), (K, 2, h, w))
    base_x, base_y = sampling_grid(K, h, w)
    xs = ad.reshape(ad.add(base_x, offsets[:, 0]), (K * h * w,))
    ys = ad.reshape(ad.add(base_y, offsets[:, 1]), (K * h * w,))

    weights = ad.softmax(linear(query, params, f"{prefix}.attn"), axis=0)
    scaled = weights
    scale = None
    if scale_map is not None:
        # s is read at the nearest in-grid point
        sx, sy = ad.clamp(xs, 0.0, w - 1.0), ad.clamp(ys, 0.0, h - 1.0)
        scale = ad.reshape(ad.bilinear_sample(scale_map, sx, sy), (K, h, w))
        scaled = ad.mul(weights, ad.sub(1.0, scale))

    sampled = ad.reshape(ad.bilinear_sample(kv, xs, ys), (d_kv, K, h, w))
    values = linear(sampled, params, f"{prefix}.value")
    pooled = ad.sum(ad.mul(values, ad.reshape(scaled, (1, K, h, w))), axis=1)
    if trace is not None:
        trace.append(AttentionTrace(weights, scaled, xs, ys, scale))
    return linear(pooled, params, f"{prefix}.out")

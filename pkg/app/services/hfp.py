"""History-based feature prediction.

The tau most recent maps of one modality are channel-concatenated and
projected to a single key/value map. A learnable per-cell query attends to it
through two deformable attention layers; their output is the predicted
dynamics, added to the newest history frame to give the compensated feature.
"""

from typing import Dict, Mapping, Sequence, Union

import numpy as np

from app.errors import ContractError, ShapeError
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.services.layers import deform_attn, init_deform_layer, init_linear, linear, to_tensors
from app.services.streams import FeatureMap, Modality, Source

QUERY_INIT_STD = 0.02
N_LAYERS = 2


def prefix(modality: Modality) -> str:
    return f"hfp.{Modality(modality).value}"


def init_hfp_params(
    rng: np.random.Generator, modality: Modality, d: int, h: int, w: int, tau: int, K: int
) -> Dict[str, np.ndarray]:
    p = prefix(modality)
    params = {f"{p}.query": rng.normal(0.0, QUERY_INIT_STD, size=(d, h, w))}
    params.update(init_linear(rng, f"{p}.history", tau * d, d))
    for layer in range(N_LAYERS):
        params.update(init_deform_layer(rng, f"{p}.layer{layer}", d, K))
    return params


def init_all(rng: np.random.Generator, d_img: int, d_pts: int, h: int, w: int, tau: int, K: int) -> Dict[str, np.ndarray]:
    params = init_hfp_params(rng, Modality.IMG, d_img, h, w, tau, K)
    params.update(init_hfp_params(rng, Modality.PTS, d_pts, h, w, tau, K))
    return params


def window_length(params: Mapping[str, Union[Tensor, np.ndarray]], modality: Modality) -> int:
    p = prefix(modality)
    d_out, d_in = params[f"{p}.history.weight"].shape
    return d_in // d_out


def predict_tensor(history: Sequence[Tensor], params: Mapping[str, Tensor], modality: Modality) -> Tensor:
    """Differentiable prediction from a window of (D, H, W) tensors, oldest first."""
    p = prefix(modality)
    tau = window_length(params, modality)
    if len(history) != tau:
        raise ContractError(f"predict[{p}]: window length {len(history)} != tau {tau}")
    query = params[f"{p}.query"]
    if history[-1].shape != query.shape:
        raise ShapeError(f"predict[{p}]: history frame {history[-1].shape} does not match query {query.shape}")
    kv = linear(ad.concat(list(history), axis=0), params, f"{p}.history")
    hidden = deform_attn(query, kv, params, f"{p}.layer0")
    dynamics = deform_attn(hidden, kv, params, f"{p}.layer1")
    return ad.add(history[-1], dynamics)


def predict(window: Sequence[FeatureMap], params: Mapping[str, np.ndarray]) -> FeatureMap:
    """Compensated feature for the frame after the window's newest entry."""
    if not window:
        raise ContractError("predict: empty window")
    modality = window[-1].modality
    out = predict_tensor([Tensor(f.data) for f in window], to_tensors(params), modality)
    return FeatureMap(modality, window[-1].time_index + 1, out.numpy(), Source.COMPENSATED)


def tempred_loss(pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray]) -> Tensor:
    """Element-mean squared error between the prediction and the extracted feature."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"tempred_loss: prediction {pred.shape} vs target {target.shape}")
    return ad.mean(ad.square(ad.sub(pred, target)))

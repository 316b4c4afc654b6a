"""Finite-difference checks for every differentiable block, on small random shapes."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from app.services import autodiff as ad
from app.services import hfp, ucf
from app.services.autodiff import Graph, Tensor
from app.services.detector import det_loss_tensor, detect_tensor, init_detector_params
from app.services.layers import deform_attn, init_deform_layer
from app.services.streams import DetectionTarget, Modality

logger = logging.getLogger(__name__)

D, SIZE, TAU, K = 4, 6, 3, 2
GRADCHECK_EPS = ad.GRADCHECK_EPS
TOLERANCE = 1e-4


@dataclass
class Block:
    name: str
    graph: Graph
    bindings: Dict[str, np.ndarray]


def _projection(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Fixed random weights that turn a map output into a well-scaled scalar."""
    return rng.normal(0.0, 1.0, size=tuple(shape))


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, weights))


def _randomize(rng: np.random.Generator, params: Mapping[str, np.ndarray], scale: float = 0.3) -> Dict[str, np.ndarray]:
    # zero biases would leave some gradients exactly symmetric; perturb everything
    return {k: v + rng.normal(0.0, scale, size=np.shape(v)) for k, v in params.items()}


def _graph(name: str, inputs: Mapping[str, np.ndarray], fn: Callable[[Mapping[str, Tensor]], Tensor]) -> Block:
    return Block(name, Graph(lambda leaves: {"loss": fn(leaves)}, tuple(sorted(inputs)), name), dict(inputs))


def bilinear_block(rng: np.random.Generator) -> Block:
    inputs = {"map": rng.normal(size=(2, 4, 4)), "xs": rng.uniform(-0.7, 3.7, size=7), "ys": rng.uniform(-0.7, 3.7, size=7)}
    w = _projection(rng, (2, 7))
    return _graph("bilinear_sample", inputs, lambda v: _weighted_sum(ad.bilinear_sample(v["map"], v["xs"], v["ys"]), w))


def deform_block(rng: np.random.Generator) -> Block:
    layer0 = init_deform_layer(rng, "l0", D, K)
    layer1 = init_deform_layer(rng, "l1", D, K)
    inputs = _randomize(rng, {**layer0, **layer1})
    inputs["query"] = rng.normal(size=(D, SIZE, SIZE))
    inputs["kv"] = rng.normal(size=(D, SIZE, SIZE))
    w = _projection(rng, (D, SIZE, SIZE))

    def fn(v):
        hidden = deform_attn(v["query"], v["kv"], v, "l0")
        return _weighted_sum(deform_attn(hidden, v["kv"], v, "l1"), w)

    return _graph("deform_attn", inputs, fn)


def hfp_block(rng: np.random.Generator) -> Block:
    params = _randomize(rng, hfp.init_hfp_params(rng, Modality.IMG, D, SIZE, SIZE, TAU, K))
    history = {f"history{i}": rng.normal(size=(D, SIZE, SIZE)) for i in range(TAU)}
    target = rng.normal(size=(D, SIZE, SIZE))

    def fn(v):
        pred = hfp.predict_tensor([v[f"history{i}"] for i in range(TAU)], v, Modality.IMG)
        return hfp.tempred_loss(pred, target)

    return _graph("hfp_predict+tempred_loss", {**params, **history}, fn)


def variance_block(rng: np.random.Generator) -> Block:
    params = _randomize(rng, ucf.init_ucf_params(rng, D, D, K))
    params = {k: v for k, v in params.items() if ".variance." in k and k.startswith("ucf.pts")}
    inputs = {**params, "pred": rng.normal(size=(D, SIZE, SIZE))}
    target = rng.normal(size=(D, SIZE, SIZE))

    def fn(v):
        variance = ucf.estimate_variance_tensor(v["pred"], v, Modality.PTS)
        return ucf.uncert_loss(v["pred"], target, variance)

    return _graph("variance_head+uncert_loss", inputs, fn)


def fusion_block(rng: np.random.Generator) -> Block:
    params = _randomize(rng, ucf.init_ucf_params(rng, D, D, K))
    inputs = {
        **{k: v for k, v in params.items() if k.startswith("ucf.img.fuse")},
        "query": rng.normal(size=(D, SIZE, SIZE)),
        "kv": rng.normal(size=(D, SIZE, SIZE)),
        "u": rng.uniform(0.2, 2.0, size=(1, SIZE, SIZE)),
    }
    targets = (rng.normal(size=(D, SIZE, SIZE)), rng.normal(size=(D, SIZE, SIZE)))

    def fn(v):
        enhanced = ucf.fuse_tensor(v["query"], v["kv"], v["u"], v, Modality.IMG)
        return ucf.fuse_loss(enhanced, v["kv"], *targets)

    return _graph("fusion+fuse_loss", inputs, fn)


def detector_block(rng: np.random.Generator) -> Block:
    params = _randomize(rng, init_detector_params(rng, D, D, 4), scale=0.2)
    inputs = {**params, "img": rng.normal(size=(D, SIZE, SIZE)), "pts": rng.normal(size=(D, SIZE, SIZE))}
    occupancy = rng.random((SIZE, SIZE)) < 0.2
    occupancy[0, 0] = True
    offsets = np.where(occupancy[None], rng.uniform(-0.5, 0.5, size=(2, SIZE, SIZE)), 0.0)
    target = DetectionTarget(occupancy, offsets)
    return _graph("detector+det_loss", inputs,
                  lambda v: det_loss_tensor(*detect_tensor(v["img"], v["pts"], v), target))


BLOCKS: Tuple[Callable[[np.random.Generator], Block], ...] = (
    bilinear_block, deform_block, hfp_block, variance_block, fusion_block, detector_block,
)


def run_suite(seed: int = 0, eps: float = GRADCHECK_EPS) -> List[Tuple[str, float]]:
    """Worst relative error per block."""
    results = []
    for make in BLOCKS:
        block = make(np.random.default_rng([seed, len(results)]))
        error = ad.grad_check(block.graph, block.bindings, eps=eps)
        logger.info("gradcheck %-28s max rel err %.3e", block.name, error)
        results.append((block.name, error))
    return results

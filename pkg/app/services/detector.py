"""Toy dense detection head.

Both modality maps are concatenated on the channel axis, projected to a hidden
width, passed through two 3x3 convolutions and split into a 1-channel
occupancy logit map and a 2-channel (dx, dy) offset map. The head is trained
once on ground-truth features and kept frozen afterwards.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple, Union

import numpy as np
from scipy.special import expit

from app.errors import ContractError, ShapeError
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.services.layers import init_linear, linear, to_tensors
from app.services.streams import DetectionTarget, FeatureMap, Modality

PREFIX = "det"


def _init_conv(rng: np.random.Generator, name: str, d_in: int, d_out: int) -> Dict[str, np.ndarray]:
    std = np.sqrt(2.0 / (9 * d_in))
    return {f"{name}.weight": rng.normal(0.0, std, size=(d_out, d_in, 3, 3)), f"{name}.bias": np.zeros(d_out)}


def init_detector_params(rng: np.random.Generator, d_img: int, d_pts: int, hidden: int) -> Dict[str, np.ndarray]:
    params: Dict[str, np.ndarray] = {}
    params.update(init_linear(rng, f"{PREFIX}.proj", d_img + d_pts, hidden))
    params.update(_init_conv(rng, f"{PREFIX}.conv1", hidden, hidden))
    params.update(_init_conv(rng, f"{PREFIX}.conv2", hidden, hidden))
    params.update(init_linear(rng, f"{PREFIX}.cls", hidden, 1))
    params.update(init_linear(rng, f"{PREFIX}.reg", hidden, 2))
    return params


@dataclass
class Detection:
    logits: np.ndarray  # (1, H, W)
    offsets: np.ndarray  # (2, H, W)

    def probabilities(self) -> np.ndarray:
        return expit(self.logits[0])


def detect_tensor(img: Tensor, pts: Tensor, params: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor]:
    if img.data.ndim != 3 or pts.data.ndim != 3 or img.shape[1:] != pts.shape[1:]:
        raise ShapeError(f"detect: img {img.shape} and pts {pts.shape} grids differ")
    expected = params[f"{PREFIX}.proj.weight"].shape[1]
    if img.shape[0] + pts.shape[0] != expected:
        raise ShapeError(f"detect: {img.shape[0]}+{pts.shape[0]} input channels, detector expects {expected}")
    x = linear(ad.concat([img, pts], axis=0), params, f"{PREFIX}.proj")
    x = ad.relu(ad.conv3x3(x, params[f"{PREFIX}.conv1.weight"], params[f"{PREFIX}.conv1.bias"]))
    x = ad.relu(ad.conv3x3(x, params[f"{PREFIX}.conv2.weight"], params[f"{PREFIX}.conv2.bias"]))
    return linear(x, params, f"{PREFIX}.cls"), linear(x, params, f"{PREFIX}.reg")


def detect(img: FeatureMap, pts: FeatureMap, params: Mapping[str, np.ndarray]) -> Detection:
    if img.modality != Modality.IMG or pts.modality != Modality.PTS:
        raise ShapeError(f"detect: expected (img, pts) maps, got ({img.modality}, {pts.modality})")
    logits, offsets = detect_tensor(Tensor(img.data), Tensor(pts.data), to_tensors(params))
    return Detection(logits.numpy(), offsets.numpy())


def det_loss_tensor(logits: Tensor, offsets: Tensor, target: DetectionTarget) -> Tensor:
    """Mean BCE over cells plus offset MSE over occupied cells (0 when none are)."""
    occupancy = np.asarray(target.occupancy, dtype=np.float64)
    if logits.shape != (1,) + occupancy.shape or offsets.shape != target.offsets.shape:
        raise ShapeError(f"det_loss: logits {logits.shape} / offsets {offsets.shape} vs target {occupancy.shape}")
    # BCE with logits: softplus(z) - y * z
    bce = ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, occupancy[None])))
    n_occupied = occupancy.sum()
    if n_occupied == 0:
        return bce
    residual = ad.mul(ad.sub(offsets, target.offsets), occupancy[None])
    reg = ad.div(ad.sum(ad.square(residual)), 2.0 * n_occupied)
    return ad.add(bce, reg)


def det_loss(pred: Union[Detection, Tuple[Tensor, Tensor]], target: DetectionTarget) -> Tensor:
    if isinstance(pred, Detection):
        return det_loss_tensor(Tensor(pred.logits), Tensor(pred.offsets), target)
    return det_loss_tensor(pred[0], pred[1], target)


@dataclass
class F1Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "F1Counts") -> "F1Counts":
        return F1Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def f1(self) -> float:
        if self.tp + self.fp + self.fn == 0:
            return 1.0
        return 2.0 * self.tp / (2.0 * self.tp + self.fp + self.fn)


def f1_counts(pred: Detection, target: DetectionTarget, threshold: float) -> F1Counts:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"det_f1: threshold must lie in (0, 1), got {threshold}")
    predicted = pred.probabilities() > threshold
    truth = np.asarray(target.occupancy, dtype=bool)
    if predicted.shape != truth.shape:
        raise ShapeError(f"det_f1: prediction {predicted.shape} vs target {truth.shape}")
    return F1Counts(
        tp=int(np.sum(predicted & truth)),
        fp=int(np.sum(predicted & ~truth)),
        fn=int(np.sum(~predicted & truth)),
    )


def det_f1(pred: Detection, target: DetectionTarget, threshold: float = 0.5) -> float:
    """Cell-level F1; 1.0 when prediction and target are both empty."""
    return f1_counts(pred, target, threshold).f1

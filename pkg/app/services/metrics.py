from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.stats import spearmanr

from app.errors import ShapeError
from app.services.streams import FeatureMap


@dataclass
class FeatureError:
    value: float
    cell_map: np.ndarray  # (1, H, W) channel-mean squared difference


def _data(x: Union[FeatureMap, np.ndarray]) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, FeatureMap) else x, dtype=np.float64)


def feature_mse(predicted: Union[FeatureMap, np.ndarray], ground_truth: Union[FeatureMap, np.ndarray]) -> FeatureError:
    a, b = _data(predicted), _data(ground_truth)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"feature_mse: {a.shape} vs {b.shape}")
    cell_map = np.mean((a - b) ** 2, axis=0, keepdims=True)
    return FeatureError(float(cell_map.mean()), cell_map)


def squared_residual(predicted: np.ndarray, ground_truth: np.ndarray) -> np.ndarray:
    """Channel-summed squared residual per cell, (H, W)."""
    return np.sum((_data(predicted) - _data(ground_truth)) ** 2, axis=0)


def rank_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman correlation of two equally sized samples; 0 for constant input."""
    a, b = np.ravel(a), np.ravel(b)
    if a.shape != b.shape:
        raise ShapeError(f"rank_correlation: {a.shape} vs {b.shape}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    rho = spearmanr(a, b).correlation
    return float(rho) if np.isfinite(rho) else 0.0

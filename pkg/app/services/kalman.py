"""Constant-velocity Kalman filter run independently on every feature cell.

All cells see the same observation pattern, so the 2x2 covariance is shared
and only the (value, rate) means are stored per cell.
"""

from typing import Dict, List, Optional, Sequence

import numpy as np

from app.config import KALMAN_OBSERVATION_NOISE, KALMAN_PROCESS_NOISE
from app.errors import ShapeError
from app.services.streams import DropSchedule, FeatureMap, Modality, Source, Stream

A = np.array([[1.0, 1.0], [0.0, 1.0]])  # state transition
H = np.array([1.0, 0.0])  # observe the value only


class CellKalman:
    """Filter bank over every cell of one (D, H, W) modality map."""

    def __init__(self, shape: Sequence[int], q: float = KALMAN_PROCESS_NOISE, r: float = KALMAN_OBSERVATION_NOISE):
        self.shape = tuple(shape)
        self.q = q
        self.r = r
        self.state = np.zeros((2, int(np.prod(self.shape))))  # prior mean 0
        self.cov = np.eye(2)
        self.steps = 0

    def predict(self) -> np.ndarray:
        self.state = A @ self.state
        self.cov = A @ self.cov @ A.T + self.q * np.eye(2)
        self.steps += 1
        return self.state[0].reshape(self.shape).copy()

    def update(self, observation: np.ndarray) -> None:
        observation = np.asarray(observation, dtype=np.float64)
        if observation.shape != self.shape:
            raise ShapeError(f"kalman update: observation {observation.shape} vs filter {self.shape}")
        innovation = observation.reshape(-1) - H @ self.state
        innovation_cov = H @ self.cov @ H + self.r
        gain = self.cov @ H / innovation_cov
        self.state = self.state + np.outer(gain, innovation)
        self.cov = (np.eye(2) - np.outer(gain, H)) @ self.cov

    def step(self, observation: Optional[np.ndarray]) -> np.ndarray:
        """Predict this frame, then fold in the observation if there is one; returns the prediction."""
        predicted = self.predict()
        if observation is not None:
            self.update(observation)
        return predicted


def kalman_baseline(
    stream: Stream,
    schedule: DropSchedule,
    q: float = KALMAN_PROCESS_NOISE,
    r: float = KALMAN_OBSERVATION_NOISE,
) -> Dict[Modality, List[FeatureMap]]:
    """Compensated maps for every missing (frame, modality), in frame order."""
    if schedule.T != stream.horizon:
        raise ShapeError(f"kalman_baseline: schedule length {schedule.T} != stream length {stream.horizon}")
    out: Dict[Modality, List[FeatureMap]] = {}
    for modality in (Modality.IMG, Modality.PTS):
        frames = stream.frames(modality)
        kf = CellKalman(frames.shape[1:], q, r)
        compensated: List[FeatureMap] = []
        for t in range(stream.horizon):
            live = schedule.is_available(t, modality)
            predicted = kf.step(frames[t] if live else None)
            if not live:
                compensated.append(FeatureMap(modality, t, predicted, Source.COMPENSATED))
        out[modality] = compensated
    return out

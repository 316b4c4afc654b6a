"""
Streaming inference under a drop schedule.

Each frame runs the same deterministic decision table per modality:
live -> use and store the extracted feature; missing -> ask the policy for a
compensated feature and store that. Learned policies with fusion then enhance
the frame's features before they reach the detector.
"""

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from app.config import KALMAN_OBSERVATION_NOISE, KALMAN_PROCESS_NOISE, MEMORY_LENGTH
from app.errors import ConfigError, ContractError, ShapeError
from app.memory_bank import MemoryBank, update_policy
from app.services import hfp, ucf
from app.services.checkpoint import load_checkpoint
from app.services.detector import Detection, detect
from app.services.kalman import CellKalman
from app.services.metrics import feature_mse
from app.services.streams import MODALITIES, DropSchedule, FeatureMap, Modality, Source, Stream

logger = logging.getLogger(__name__)


class Policy(str, Enum):
    ZERO_FILL = "ZeroFill"
    COPY_LAST = "CopyLast"
    KALMAN = "Kalman"
    HFP = "HFP"
    HFP_UCF = "HFP+UCF"
    HFP_UCF_NO_U = "HFP+UCF/noU"

    @property
    def learned(self) -> bool:
        return self in (Policy.HFP, Policy.HFP_UCF, Policy.HFP_UCF_NO_U)

    @property
    def fuses(self) -> bool:
        return self in (Policy.HFP_UCF, Policy.HFP_UCF_NO_U)

    @property
    def slug(self) -> str:
        """Filesystem-safe name, e.g. ``HFP-UCF-noU``."""
        return self.value.replace("+", "-").replace("/", "-")

    @property
    def checkpoint(self) -> str:
        """Stem of the cumulative checkpoint this policy needs."""
        if self.fuses:
            return "ucf"
        if self is Policy.HFP:
            return "hfp"
        return "det"


def parse_policy(name: str) -> Policy:
    for policy in Policy:
        if name.strip().lower() in (policy.value.lower(), policy.slug.lower()):
            return policy
    raise ConfigError("eval.policy", f"unknown policy {name!r}; expected one of {[p.value for p in Policy]}")


def load_policy_params(checkpoint_dir: str, policy: Policy) -> Dict[str, np.ndarray]:
    """Checkpoints are cumulative: ``det`` < ``hfp`` (det + hfp) < ``ucf`` (all three)."""
    return load_checkpoint(os.path.join(checkpoint_dir, policy.checkpoint))


@dataclass
class FrameResult:
    t: int
    available: Tuple[bool, bool]
    features: Dict[Modality, FeatureMap]
    detection: Detection
    # Feature MSE against the extracted map, for missing modalities only.
    mse: Dict[Modality, float] = field(default_factory=dict)
    cell_mse: Dict[Modality, np.ndarray] = field(default_factory=dict)
    uncertainty: Dict[Modality, np.ndarray] = field(default_factory=dict)
    bank_indexes: Dict[Modality, List[int]] = field(default_factory=dict)
    bank_sources: Dict[Modality, List[Source]] = field(default_factory=dict)

    @property
    def both_dropped(self) -> bool:
        return not any(self.available)


@dataclass
class InferenceResult:
    stream_id: int
    policy: Policy
    frames: List[FrameResult]


@dataclass
class EvalOptions:
    tau: int = MEMORY_LENGTH
    use_uncertainty: bool = True
    fuse_when: str = "missing"
    fuse_live: bool = False
    kalman_q: float = KALMAN_PROCESS_NOISE
    kalman_r: float = KALMAN_OBSERVATION_NOISE


def _compensate(
    policy: Policy,
    modality: Modality,
    t: int,
    bank: MemoryBank,
    kalman_prediction: Optional[np.ndarray],
    params: Mapping[str, np.ndarray],
    shape: Tuple[int, ...],
) -> FeatureMap:
    if policy is Policy.KALMAN:
        return FeatureMap(modality, t, kalman_prediction, Source.COMPENSATED)
    # nothing to compensate from on frame 0
    if len(bank) == 0 or policy is Policy.ZERO_FILL:
        return FeatureMap.zeros(modality, t, shape)
    if policy is Policy.COPY_LAST:
        return FeatureMap(modality, t, bank.newest.data, Source.COMPENSATED)
    return hfp.predict(bank.window(), params)


def run_inference(
    stream: Stream,
    schedule: DropSchedule,
    policy: Policy,
    params: Mapping[str, np.ndarray],
    options: Optional[EvalOptions] = None,
) -> InferenceResult:
    """
    Process one stream frame by frame.

    ``params`` carries the detector and, for learned policies, the hfp and ucf
    parameters. Fusion runs on frames with a missing modality (or on every
    frame when ``fuse_when == "always"``); live modalities keep their extracted
    feature unless ``fuse_live`` is set.
    """
    options = options or EvalOptions()
    policy = Policy(policy)
    if schedule.T != stream.horizon:
        raise ShapeError(f"run_inference: schedule length {schedule.T} != stream length {stream.horizon}")
    needed = ["det."] + (["hfp."] if policy.learned else []) + (["ucf."] if policy.fuses else [])
    for prefix in needed:
        if not any(name.startswith(prefix) for name in params):
            raise ContractError(f"run_inference: policy {policy.value} needs {prefix}* parameters")
    if policy.learned:
        tau = hfp.window_length(params, Modality.IMG)
        if tau != options.tau:
            logger.debug("Using checkpoint window length %d instead of configured %d", tau, options.tau)
    else:
        tau = options.tau

    banks = {m: MemoryBank(m, tau) for m in MODALITIES}
    filters: Dict[Modality, CellKalman] = {}
    if policy is Policy.KALMAN:
        filters = {m: CellKalman(stream.frames(m).shape[1:], options.kalman_q, options.kalman_r) for m in MODALITIES}

    frames: List[FrameResult] = []
    for t in range(stream.horizon):
        available = (schedule.is_available(t, Modality.IMG), schedule.is_available(t, Modality.PTS))
        extracted = {m: stream.feature(m, t) for m in MODALITIES}
        used: Dict[Modality, FeatureMap] = {}
        missing: List[Modality] = []
        for m in MODALITIES:
            live = available[m.index]
            prediction = None
            if m in filters:
                prediction = filters[m].step(extracted[m].data if live else None)
            if live:
                used[m] = extracted[m]
                update_policy(banks[m], True, extracted=extracted[m])
            else:
                compensated = _compensate(policy, m, t, banks[m], prediction, params, extracted[m].shape)
                used[m] = compensated
                missing.append(m)
                update_policy(banks[m], False, compensated=compensated)

        uncertainty: Dict[Modality, np.ndarray] = {}
        if policy.fuses and (missing or options.fuse_when == "always"):
            use_u = options.use_uncertainty and policy is Policy.HFP_UCF
            uncertainty = {
                m: ucf.uncertainty_map(ucf.estimate_variance(used[m], params)) for m in MODALITIES
            }
            enhanced = {
                m: ucf.fuse(used[m], used[m.other], uncertainty[m.other], params, use_uncertainty=use_u).feature
                for m in MODALITIES
            }
            for m in MODALITIES:
                if m in missing or options.fuse_live:
                    used[m] = enhanced[m]

        detection = detect(used[Modality.IMG], used[Modality.PTS], params)
        result = FrameResult(t, available, dict(used), detection, uncertainty=uncertainty)
        for m in missing:
            error = feature_mse(used[m], extracted[m])
            result.mse[m] = error.value
            result.cell_mse[m] = error.cell_map
        for m in MODALITIES:
            result.bank_indexes[m] = banks[m].time_indexes
            result.bank_sources[m] = banks[m].sources
        frames.append(result)
    return InferenceResult(stream.stream_id, policy, frames)


def summarize_frame(frame: FrameResult) -> str:
    """One-line description of a processed frame, for status callbacks and debug logs."""
    parts = []
    for m in MODALITIES:
        state = "live" if frame.available[m.index] else f"{frame.features[m].source.value.lower()}"
        if m in frame.mse:
            state += f" mse={frame.mse[m]:.4g}"
        parts.append(f"{m.value}:{state}")
    return f"t={frame.t} " + " ".join(parts)

"""Shared configuration for the ModalPatch components.

Module constants are the defaults; ``RunConfig`` groups them per section and
is loaded from a flat ``section.key = value`` file plus command-line overrides.
"""

import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Iterable, List, Optional

from app.errors import ConfigError, MissingArtifactError

# Grid and channels
GRID_HEIGHT = 32
GRID_WIDTH = 32
D_IMG = 16
D_PTS = 16

# Stream corpus
N_TRAIN_STREAMS = 64
N_VAL_STREAMS = 16
FRAMES = 40
N_OBJECTS = 6
MAX_SPEED = 1.0
SPEED_LIMIT = 1.5
MIN_SPEED = 0.3
MOTION_NOISE = 0.05
OBSERVATION_NOISE = 0.02
BLOB_STD = 1.5
# Objects farther than this from the grid center are dimmed in the camera stream.
IMG_RANGE = 10.0
IMG_FAR_ATTENUATION = 0.1

# ModalPatch
MEMORY_LENGTH = 6
SAMPLING_POINTS = 4
LOGVAR_CLAMP = 10.0
DETECTOR_HIDDEN = 32

# Optimization (AdamW, lr 2e-4; the full preset runs 12 epochs per stage)
LEARNING_RATE = 0.0002
EPOCHS = 8
WEIGHT_DECAY = 0.01
BATCH_SIZE = 4
GRAD_CLIP = 1.0
SEED = 42
DET_LEARNING_RATE = 0.002
DET_EPOCHS = 8
DET_TARGET_F1 = 0.9
DET_MIN_F1 = 0.6

# Evaluation
DROP_RATES = (0.0, 0.1, 0.3, 0.5)
F1_THRESHOLD = 0.5
SCHEDULE_SEED = 1000
KALMAN_PROCESS_NOISE = 1e-3
KALMAN_OBSERVATION_NOISE = 4e-4

THREADS_ENV = "MODALPATCH_THREADS"


@dataclass(frozen=True)
class StreamsConfig:
    height: int = GRID_HEIGHT
    width: int = GRID_WIDTH
    d_img: int = D_IMG
    d_pts: int = D_PTS
    n_train: int = N_TRAIN_STREAMS
    n_val: int = N_VAL_STREAMS
    frames: int = FRAMES
    n_objects: int = N_OBJECTS
    max_speed: float = MAX_SPEED
    min_speed: float = MIN_SPEED
    motion_noise: float = MOTION_NOISE
    noise_std: float = OBSERVATION_NOISE
    blob_std: float = BLOB_STD
    img_range: float = IMG_RANGE
    seed: int = SEED


@dataclass(frozen=True)
class MembankConfig:
    tau: int = MEMORY_LENGTH


@dataclass(frozen=True)
class HfpConfig:
    K: int = SAMPLING_POINTS


@dataclass(frozen=True)
class UcfConfig:
    K: int = SAMPLING_POINTS
    use_uncertainty: bool = True
    # "missing": fuse only on frames with a dropped modality; "always": every frame.
    fuse_when: str = "missing"
    fuse_live: bool = False


@dataclass(frozen=True)
class DetectorConfig:
    hidden: int = DETECTOR_HIDDEN


@dataclass(frozen=True)
class TrainConfig:
    lr: float = LEARNING_RATE
    epochs: int = EPOCHS
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = BATCH_SIZE
    clip_norm: float = GRAD_CLIP
    seed: int = SEED
    det_lr: float = DET_LEARNING_RATE
    det_epochs: int = DET_EPOCHS
    det_target_f1: float = DET_TARGET_F1
    det_min_f1: float = DET_MIN_F1


@dataclass(frozen=True)
class EvalConfig:
    rates: str = ",".join(str(r) for r in DROP_RATES)
    policies: str = "ZeroFill,CopyLast,Kalman,HFP,HFP+UCF"
    policy: str = "HFP+UCF"
    rate: float = 0.5
    schedule_seed: int = SCHEDULE_SEED
    drop_mode: str = "iid"
    burst_stay: float = 0.8
    threshold: float = F1_THRESHOLD
    kalman_q: float = KALMAN_PROCESS_NOISE
    kalman_r: float = KALMAN_OBSERVATION_NOISE
    heatmap_rate: float = 0.5
    heatmap_streams: int = 1
    heatmap_frames: int = 3
    timing: bool = False

    @property
    def rate_list(self) -> List[float]:
        return [float(r) for r in self.rates.split(",") if r.strip()]

    @property
    def policy_list(self) -> List[str]:
        return [p.strip() for p in self.policies.split(",") if p.strip()]


@dataclass(frozen=True)
class PathsConfig:
    streams: str = "streams"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    streams: StreamsConfig = field(default_factory=StreamsConfig)
    membank: MembankConfig = field(default_factory=MembankConfig)
    hfp: HfpConfig = field(default_factory=HfpConfig)
    ucf: UcfConfig = field(default_factory=UcfConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_flat(self) -> Dict[str, Any]:
        """Dotted-key view of every field, in declaration order."""
        flat: Dict[str, Any] = {}
        for section in fields(self):
            values = getattr(self, section.name)
            for item in fields(values):
                flat[f"{section.name}.{item.name}"] = getattr(values, item.name)
        return flat

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_flat().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: Any, expected: type) -> Any:
    if isinstance(raw, expected) and not (expected is not bool and isinstance(raw, bool)):
        return raw
    if expected is float and isinstance(raw, int) and not isinstance(raw, bool):
        return float(raw)
    if not isinstance(raw, str):
        raise ConfigError(key, f"expected {expected.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if expected is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if expected is int:
            return int(text)
        if expected is float:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {expected.__name__}")
    return text


def apply_overrides(config: RunConfig, values: Dict[str, Any]) -> RunConfig:
    """Return a copy of ``config`` with dotted keys replaced; unknown keys are rejected."""
    sections: Dict[str, Dict[str, Any]] = {}
    for key, raw in values.items():
        section_name, _, name = key.partition(".")
        if not name or section_name not in {f.name for f in fields(config)}:
            raise ConfigError(key, "unknown key")
        section = getattr(config, section_name)
        types = {f.name: f.type for f in fields(section)}
        if name not in types:
            raise ConfigError(key, "unknown key")
        expected = types[name]
        if isinstance(expected, str):
            expected = {"int": int, "float": float, "bool": bool, "str": str}[expected]
        sections.setdefault(section_name, {})[name] = _coerce(key, raw, expected)
    updated = {name: replace(getattr(config, name), **vals) for name, vals in sections.items()}
    result = replace(config, **updated)
    validate(result)
    return result


def validate(config: RunConfig) -> None:
    s = config.streams
    checks = [
        ("streams.height", s.height >= 2, "must be >= 2"),
        ("streams.width", s.width >= 2, "must be >= 2"),
        ("streams.d_img", s.d_img >= 2 and s.d_img % 2 == 0, "must be an even number >= 2"),
        ("streams.d_pts", s.d_pts >= 2, "must be >= 2"),
        ("streams.frames", s.frames >= 2, "must be >= 2"),
        ("streams.n_objects", s.n_objects >= 1, "must be >= 1"),
        ("streams.max_speed", 0 < s.max_speed <= SPEED_LIMIT, f"must be in (0, {SPEED_LIMIT}]"),
        ("streams.min_speed", 0 <= s.min_speed <= s.max_speed, "must be in [0, streams.max_speed]"),
        ("membank.tau", config.membank.tau >= 1, "must be >= 1"),
        ("hfp.K", config.hfp.K >= 1, "must be >= 1"),
        ("ucf.K", config.ucf.K >= 1, "must be >= 1"),
        ("ucf.fuse_when", config.ucf.fuse_when in ("missing", "always"), "must be 'missing' or 'always'"),
        ("train.lr", config.train.lr > 0, "must be positive"),
        ("train.epochs", config.train.epochs >= 1, "must be >= 1"),
        ("train.batch_size", config.train.batch_size >= 1, "must be >= 1"),
        ("eval.drop_mode", config.eval.drop_mode in ("iid", "bursty"), "must be 'iid' or 'bursty'"),
        ("eval.threshold", 0 < config.eval.threshold < 1, "must be in (0, 1)"),
    ]
    for key, ok, message in checks:
        if not ok:
            raise ConfigError(key, message)
    for rate in config.eval.rate_list + [config.eval.rate]:
        if not 0.0 <= rate <= 1.0:
            raise ConfigError("eval.rates", f"rate {rate} outside [0, 1]")


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_presets() -> Dict[str, Dict[str, Any]]:
    """Load named presets from presets.json."""
    app_dir = os.path.dirname(os.path.abspath(__file__))
    with open(os.path.join(app_dir, "presets.json"), "r", encoding="utf-8") as f:
        data = json.load(f)
    return {p["preset_id"]: p.get("values", {}) for p in data.get("presets", [])}


def load_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    preset: Optional[str] = None,
) -> RunConfig:
    """Preset, then file, then ``key=value`` overrides."""
    config = RunConfig()
    if preset is not None:
        presets = load_presets()
        if preset not in presets:
            raise ConfigError("preset", f"unknown preset {preset!r}")
        config = apply_overrides(config, presets[preset])
    if path is not None:
        if not os.path.exists(path):
            raise MissingArtifactError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            config = apply_overrides(config, parse_config_text(f.read()))
    extra: Dict[str, str] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.key=value")
        extra[key.strip()] = value.strip()
    if extra:
        config = apply_overrides(config, extra)
    validate(config)
    return config


def resolve_threads() -> int:
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(THREADS_ENV, f"cannot parse {raw!r} as int")

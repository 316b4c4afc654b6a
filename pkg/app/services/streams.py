"""Synthetic two-modality feature streams with drop schedules.

A ``Scene`` holds latent object trajectories on an H x W grid. Each frame is
rendered into a camera-like ``img`` map (class and appearance channels, dimmed
beyond a range limit) and a LiDAR-like ``pts`` map (occupancy and radial
geometry, no class information). Detection targets come from the same scene.
"""

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import IMG_FAR_ATTENUATION, SPEED_LIMIT, StreamsConfig
from app.errors import ContractError, MissingArtifactError, ShapeError

logger = logging.getLogger(__name__)

WIRE_DTYPE = np.dtype("<f8")
RADIAL_BANDWIDTH = 0.15


class Modality(str, Enum):
    IMG = "img"
    PTS = "pts"

    @property
    def index(self) -> int:
        return 0 if self is Modality.IMG else 1

    @property
    def other(self) -> "Modality":
        return Modality.PTS if self is Modality.IMG else Modality.IMG


MODALITIES: Tuple[Modality, Modality] = (Modality.IMG, Modality.PTS)


class Source(str, Enum):
    EXTRACTED = "Extracted"
    COMPENSATED = "Compensated"
    FUSED = "Fused"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    modality: Modality
    time_index: int
    data: np.ndarray
    source: Source = Source.EXTRACTED

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def with_source(self, source: Source) -> "FeatureMap":
        return FeatureMap(self.modality, self.time_index, self.data, source)

    @classmethod
    def zeros(cls, modality: Modality, time_index: int, shape: Sequence[int],
              source: Source = Source.COMPENSATED) -> "FeatureMap":
        return cls(modality, time_index, np.zeros(tuple(shape)), source)


@dataclass(frozen=True, eq=False)
class Scene:
    """Object trajectories: positions and velocities are (T, n, 2) as (x, y)."""

    seed: int
    height: int
    width: int
    positions: np.ndarray
    velocities: np.ndarray
    classes: np.ndarray
    appearance: np.ndarray
    motion_noise: float = 0.0

    @property
    def horizon(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_objects(self) -> int:
        return int(self.positions.shape[1])

    @classmethod
    def empty(cls, T: int, height: int, width: int, seed: int = 0) -> "Scene":
        return cls(seed, height, width, np.zeros((T, 0, 2)), np.zeros((T, 0, 2)),
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    def objects_at(self, t: int) -> List[Dict[str, object]]:
        self._check_t(t)
        return [
            {
                "position": tuple(self.positions[t, i]),
                "velocity": tuple(self.velocities[t, i]),
                "class": int(self.classes[i]),
                "appearance": float(self.appearance[i]),
            }
            for i in range(self.n_objects)
        ]

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.horizon:
            raise ContractError(f"time index {t} outside [0, {self.horizon})")


@dataclass(frozen=True, eq=False)
class DetectionTarget:
    occupancy: np.ndarray  # (H, W) bool
    offsets: np.ndarray  # (2, H, W): (dx, dy), zero where unoccupied


@dataclass(frozen=True, eq=False)
class DropSchedule:
    T: int
    rate_img: float
    rate_pts: float
    seed: int
    available: np.ndarray  # (T, 2) bool, column per modality
    mode: str = "iid"

    def is_available(self, t: int, modality: Modality) -> bool:
        return bool(self.available[t, modality.index])

    @property
    def both_dropped(self) -> np.ndarray:
        return ~self.available.any(axis=1)

    def to_dict(self) -> Dict[str, object]:
        return {
            "T": self.T,
            "rate_img": self.rate_img,
            "rate_pts": self.rate_pts,
            "seed": self.seed,
            "mode": self.mode,
            "available": self.available.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "DropSchedule":
        return cls(int(data["T"]), float(data["rate_img"]), float(data["rate_pts"]), int(data["seed"]),
                   np.asarray(data["available"], dtype=bool), str(data.get("mode", "iid")))


@dataclass(eq=False)
class Stream:
    """One rendered sequence: features (T, D, H, W) per modality plus the scene."""

    stream_id: int
    scene: Scene
    img: np.ndarray
    pts: np.ndarray
    _targets: Dict[int, DetectionTarget] = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return self.scene.horizon

    def frames(self, modality: Modality) -> np.ndarray:
        return self.img if modality is Modality.IMG else self.pts

    def feature(self, modality: Modality, t: int) -> FeatureMap:
        return FeatureMap(modality, t, self.frames(modality)[t], Source.EXTRACTED)

    def target(self, t: int) -> DetectionTarget:
        if t not in self._targets:
            self._targets[t] = render_targets(self.scene, t)
        return self._targets[t]


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def _reflect(p: float, v: float, high: float) -> Tuple[float, float]:
    while p < 0.0 or p > high:
        if p < 0.0:
            p, v = -p, -v
        if p > high:
            p, v = 2.0 * high - p, -v
    return p, v


def gen_scene(
    seed: int,
    n_objects: int,
    T: int,
    height: int = StreamsConfig.height,
    width: int = StreamsConfig.width,
    motion_noise: float = StreamsConfig.motion_noise,
    max_speed: float = StreamsConfig.max_speed,
    min_speed: float = StreamsConfig.min_speed,
) -> Scene:
    """Constant-velocity objects with positional jitter, reflected at the borders."""
    if n_objects < 1:
        raise ContractError(f"gen_scene: n_objects must be >= 1, got {n_objects}")
    if T < 2:
        raise ContractError(f"gen_scene: T must be >= 2, got {T}")
    if max_speed > SPEED_LIMIT:
        raise ContractError(f"gen_scene: max_speed {max_speed} exceeds {SPEED_LIMIT}")
    rng = np.random.default_rng(seed)
    hi = np.array([width - 1.0, height - 1.0])
    start = rng.uniform(0.0, 1.0, size=(n_objects, 2)) * hi
    speed = rng.uniform(min_speed, max_speed, size=n_objects)
    heading = rng.uniform(0.0, 2.0 * np.pi, size=n_objects)
    vel0 = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
    classes = rng.integers(0, 2, size=n_objects)
    appearance = rng.uniform(0.5, 1.0, size=n_objects)
    jitter = rng.normal(0.0, 1.0, size=(T, n_objects, 2)) * motion_noise

    positions = np.zeros((T, n_objects, 2))
    velocities = np.zeros((T, n_objects, 2))
    positions[0], velocities[0] = start, vel0
    for t in range(1, T):
        for i in range(n_objects):
            for axis in range(2):
                p = positions[t - 1, i, axis] + velocities[t - 1, i, axis] + jitter[t, i, axis]
                positions[t, i, axis], velocities[t, i, axis] = _reflect(p, velocities[t - 1, i, axis], hi[axis])
    return Scene(seed, height, width, positions, velocities, classes, appearance, motion_noise)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _blobs(scene: Scene, t: int, blob_std: float) -> np.ndarray:
    """(n, H, W) isotropic Gaussians centred on each object."""
    ys, xs = np.mgrid[0:scene.height, 0:scene.width].astype(np.float64)
    pos = scene.positions[t]
    dx = xs[None] - pos[:, 0, None, None]
    dy = ys[None] - pos[:, 1, None, None]
    return np.exp(-(dx * dx + dy * dy) / (2.0 * blob_std ** 2))


def _center_distance(scene: Scene, t: int) -> np.ndarray:
    center = np.array([(scene.width - 1) / 2.0, (scene.height - 1) / 2.0])
    return np.linalg.norm(scene.positions[t] - center, axis=1)


def render_features(scene: Scene, t: int, modality: Modality, cfg: Optional[StreamsConfig] = None) -> FeatureMap:
    """Render one frame of one modality (source = Extracted)."""
    cfg = cfg or StreamsConfig(height=scene.height, width=scene.width)
    scene._check_t(t)
    modality = Modality(modality)
    blobs = _blobs(scene, t, cfg.blob_std)
    dist = _center_distance(scene, t)
    if modality is Modality.IMG:
        half = cfg.d_img // 2
        ramp = np.linspace(1.0, 0.25, half)
        atten = np.where(dist > cfg.img_range, IMG_FAR_ATTENUATION, 1.0)
        data = np.zeros((cfg.d_img, scene.height, scene.width))
        for i in range(scene.n_objects):
            c = int(scene.classes[i])
            data[c * half:(c + 1) * half] += ramp[:, None, None] * (scene.appearance[i] * atten[i] * blobs[i])
    else:
        max_dist = np.hypot((scene.width - 1) / 2.0, (scene.height - 1) / 2.0)
        centers = np.linspace(0.0, 1.0, cfg.d_pts - 1)
        data = np.zeros((cfg.d_pts, scene.height, scene.width))
        data[0] = blobs.sum(axis=0)
        for i in range(scene.n_objects):
            code = np.exp(-((dist[i] / max_dist - centers) ** 2) / (2.0 * RADIAL_BANDWIDTH ** 2))
            data[1:] += code[:, None, None] * blobs[i]
    rng = np.random.default_rng([scene.seed, t, modality.index])
    data = data + rng.normal(0.0, cfg.noise_std, size=data.shape)
    return FeatureMap(modality, t, data, Source.EXTRACTED)


def render_targets(scene: Scene, t: int) -> DetectionTarget:
    """Occupancy at each object's nearest cell (round half to even) plus sub-cell offsets."""
    scene._check_t(t)
    occupancy = np.zeros((scene.height, scene.width), dtype=bool)
    offsets = np.zeros((2, scene.height, scene.width))
    for x, y in scene.positions[t]:
        col, row = int(np.rint(x)), int(np.rint(y))
        col = min(max(col, 0), scene.width - 1)
        row = min(max(row, 0), scene.height - 1)
        occupancy[row, col] = True
        offsets[:, row, col] = (x - col, y - row)
    return DetectionTarget(occupancy, offsets)


# ---------------------------------------------------------------------------
# Drop schedules
# ---------------------------------------------------------------------------

def _bursty(u: np.ndarray, rate: float, stay: float) -> np.ndarray:
    """Two-state Markov drops with stationary rate ``rate`` and drop persistence ``stay``."""
    if rate <= 0.0:
        return np.ones(u.shape, dtype=bool)
    if rate >= 1.0:
        return np.zeros(u.shape, dtype=bool)
    enter = rate * (1.0 - stay) / (1.0 - rate)
    if enter > 1.0:
        logger.warning("burst_stay %.3f too low for rate %.3f; clipping entry probability", stay, rate)
        enter = 1.0
    available = np.empty(u.shape, dtype=bool)
    dropped = u[0] < rate
    for t in range(u.size):
        if t > 0:
            dropped = u[t] < (stay if dropped else enter)
        available[t] = not dropped
    return available


def gen_drop_schedule(
    seed: int,
    T: int,
    rate_img: float,
    rate_pts: float,
    mode: str = "iid",
    burst_stay: float = 0.8,
) -> DropSchedule:
    """Independent per-frame, per-modality availability draws.

    Draws are uniforms compared against the rate, so one seed at a higher rate
    drops a superset of the frames dropped at a lower rate (iid mode).
    """
    for name, rate in (("rate_img", rate_img), ("rate_pts", rate_pts)):
        if not 0.0 <= rate <= 1.0:
            raise ContractError(f"gen_drop_schedule: {name}={rate} outside [0, 1]")
    u = np.random.default_rng(seed).random((T, 2))
    if mode == "iid":
        available = u >= np.array([rate_img, rate_pts])
    elif mode == "bursty":
        available = np.stack([_bursty(u[:, 0], rate_img, burst_stay), _bursty(u[:, 1], rate_pts, burst_stay)], axis=1)
    else:
        raise ContractError(f"gen_drop_schedule: unknown mode {mode!r}")
    return DropSchedule(T, float(rate_img), float(rate_pts), int(seed), available, mode)


# ---------------------------------------------------------------------------
# Corpora and on-disk layout
# ---------------------------------------------------------------------------

SPLIT_OFFSETS = {"train": 0, "val": 50_000}


def scene_seed(cfg: StreamsConfig, split: str, index: int) -> int:
    return cfg.seed * 100_003 + SPLIT_OFFSETS[split] + index


def build_stream(stream_id: int, seed: int, cfg: StreamsConfig) -> Stream:
    scene = gen_scene(seed, cfg.n_objects, cfg.frames, cfg.height, cfg.width,
                      cfg.motion_noise, cfg.max_speed, cfg.min_speed)
    return render_stream(stream_id, scene, cfg)


def render_stream(stream_id: int, scene: Scene, cfg: StreamsConfig) -> Stream:
    img = np.stack([render_features(scene, t, Modality.IMG, cfg).data for t in range(scene.horizon)])
    pts = np.stack([render_features(scene, t, Modality.PTS, cfg).data for t in range(scene.horizon)])
    return Stream(stream_id, scene, img, pts)


def build_corpus(cfg: StreamsConfig, split: str) -> List[Stream]:
    count = cfg.n_train if split == "train" else cfg.n_val
    return [build_stream(i, scene_seed(cfg, split, i), cfg) for i in range(count)]


def schedule_seed(base: int, stream_id: int) -> int:
    """Per-stream seed shared by every policy and rate."""
    return base + stream_id


def save_streams(root: str, streams: Sequence[Stream], schedules: Optional[Dict[int, DropSchedule]] = None) -> None:
    """Replaces any scenes and schedules already under ``root``."""
    os.makedirs(root, exist_ok=True)
    for name in os.listdir(root):
        path = os.path.join(root, name)
        if name.startswith("scene_") and os.path.isdir(path):
            shutil.rmtree(path)
        elif name.startswith("schedule_") and name.endswith(".json"):
            os.remove(path)
    for stream in streams:
        scene_dir = os.path.join(root, f"scene_{stream.stream_id}")
        os.makedirs(scene_dir, exist_ok=True)
        scene = stream.scene
        meta = {
            "stream_id": stream.stream_id,
            "seed": scene.seed,
            "T": scene.horizon,
            "height": scene.height,
            "width": scene.width,
            "d_img": int(stream.img.shape[1]),
            "d_pts": int(stream.pts.shape[1]),
            "motion_noise": scene.motion_noise,
            "classes": scene.classes.tolist(),
            "appearance": scene.appearance.tolist(),
            "positions": scene.positions.tolist(),
            "velocities": scene.velocities.tolist(),
        }
        with open(os.path.join(scene_dir, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, sort_keys=True)
        for t in range(scene.horizon):
            for modality in MODALITIES:
                path = os.path.join(scene_dir, f"{modality.value}_{t}.bin")
                stream.frames(modality)[t].astype(WIRE_DTYPE).tofile(path)
    for stream_id, schedule in (schedules or {}).items():
        with open(os.path.join(root, f"schedule_{stream_id}.json"), "w", encoding="utf-8") as f:
            json.dump(schedule.to_dict(), f, sort_keys=True)
    logger.info("Wrote %d streams to %s", len(streams), root)


def load_streams(root: str) -> List[Stream]:
    if not os.path.isdir(root):
        raise MissingArtifactError(f"stream directory not found: {root}")
    names = [n for n in os.listdir(root) if n.startswith("scene_")]
    if not names:
        raise MissingArtifactError(f"no scene_<id> directories in {root}")
    streams = []
    for name in sorted(names, key=lambda n: int(n.split("_", 1)[1])):
        scene_dir = os.path.join(root, name)
        with open(os.path.join(scene_dir, "meta.json"), "r", encoding="utf-8") as f:
            meta = json.load(f)
        T, h, w = meta["T"], meta["height"], meta["width"]
        scene = Scene(
            meta["seed"], h, w,
            np.asarray(meta["positions"], dtype=np.float64).reshape(T, -1, 2),
            np.asarray(meta["velocities"], dtype=np.float64).reshape(T, -1, 2),
            np.asarray(meta["classes"], dtype=np.int64),
            np.asarray(meta["appearance"], dtype=np.float64),
            float(meta["motion_noise"]),
        )
        frames = {}
        for modality, depth in ((Modality.IMG, meta["d_img"]), (Modality.PTS, meta["d_pts"])):
            stack = []
            for t in range(T):
                raw = np.fromfile(os.path.join(scene_dir, f"{modality.value}_{t}.bin"), dtype=WIRE_DTYPE)
                if raw.size != depth * h * w:
                    raise ShapeError(f"{scene_dir}/{modality.value}_{t}.bin: expected {depth * h * w} values, got {raw.size}")
                stack.append(raw.astype(np.float64).reshape(depth, h, w))
            frames[modality] = np.stack(stack)
        streams.append(Stream(int(meta["stream_id"]), scene, frames[Modality.IMG], frames[Modality.PTS]))
    return streams


def load_schedule(root: str, stream_id: int) -> DropSchedule:
    path = os.path.join(root, f"schedule_{stream_id}.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"schedule not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return DropSchedule.from_dict(json.load(f))

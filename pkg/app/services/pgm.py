"""8-bit grayscale PGM heatmaps with a JSON sidecar holding the scale."""

import json
import os
from typing import Dict, Optional, Tuple

import numpy as np
from PIL import Image

from app.errors import MissingArtifactError, ShapeError


def write_pgm(path: str, values: np.ndarray, meta: Optional[Dict[str, object]] = None) -> float:
    """Linear scale from 0 to the map maximum; returns that maximum.

    ``<path>.json`` records ``max`` (the value drawn as 255) plus ``meta``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"write_pgm: expected a 2-D map, got {values.shape}")
    top = float(values.max()) if values.size else 0.0
    scaled = np.zeros(values.shape) if top <= 0 else np.clip(values, 0.0, None) / top
    pixels = np.rint(scaled * 255.0).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(pixels).save(path, format="PPM")
    sidecar = {"max": top, "min": float(values.min()) if values.size else 0.0}
    sidecar.update(meta or {})
    with open(f"{path}.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return top


def read_pgm(path: str) -> Tuple[np.ndarray, Dict[str, object]]:
    """Pixels rescaled back to data units via the sidecar maximum."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "L":
                raise MissingArtifactError(f"read_pgm: {path} is {img.mode}, expected 8-bit grayscale")
            pixels = np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise MissingArtifactError(f"read_pgm: cannot read {path}: {exc}") from exc
    meta: Dict[str, object] = {}
    if os.path.exists(f"{path}.json"):
        with open(f"{path}.json", "r", encoding="utf-8") as f:
            meta = json.load(f)
    top = float(meta.get("max", 255.0))
    return pixels.astype(np.float64) / 255.0 * top, meta

"""Parameter checkpoints: a flat little-endian float64 blob plus a JSON header.

``<stem>.bin`` holds every parameter back to back in name order;
``<stem>.json`` lists ``{name, shape, offset}`` (offset in bytes).
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from app.errors import MissingArtifactError

logger = logging.getLogger(__name__)

WIRE_DTYPE = np.dtype("<f8")


def checkpoint_paths(stem: str) -> Tuple[str, str]:
    return f"{stem}.bin", f"{stem}.json"


def save_checkpoint(stem: str, params: Mapping[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> str:
    """Write ``params`` under ``stem``; returns the sha256 of the blob."""
    bin_path, json_path = checkpoint_paths(stem)
    os.makedirs(os.path.dirname(os.path.abspath(bin_path)), exist_ok=True)
    entries = []
    offset = 0
    digest = hashlib.sha256()
    with open(bin_path, "wb") as f:
        for name in sorted(params):
            raw = np.ascontiguousarray(params[name], dtype=WIRE_DTYPE).tobytes()
            f.write(raw)
            digest.update(raw)
            entries.append({"name": name, "shape": list(np.shape(params[name])), "offset": offset})
            offset += len(raw)
    header = {"params": entries, "bytes": offset, "sha256": digest.hexdigest(), "meta": meta or {}}
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
    logger.info("Saved %d parameters (%d bytes) to %s", len(entries), offset, bin_path)
    return header["sha256"]


def load_checkpoint(stem: str) -> Dict[str, np.ndarray]:
    bin_path, json_path = checkpoint_paths(stem)
    if not (os.path.exists(bin_path) and os.path.exists(json_path)):
        raise MissingArtifactError(f"checkpoint not found: {stem}(.bin/.json)")
    with open(json_path, "r", encoding="utf-8") as f:
        header = json.load(f)
    blob = np.fromfile(bin_path, dtype=WIRE_DTYPE)
    params: Dict[str, np.ndarray] = {}
    for entry in header["params"]:
        start = entry["offset"] // WIRE_DTYPE.itemsize
        count = int(np.prod(entry["shape"], dtype=np.int64))
        params[entry["name"]] = blob[start:start + count].astype(np.float64).reshape(entry["shape"])
    return params


def load_meta(stem: str) -> Dict[str, Any]:
    _, json_path = checkpoint_paths(stem)
    if not os.path.exists(json_path):
        raise MissingArtifactError(f"checkpoint header not found: {json_path}")
    with open(json_path, "r", encoding="utf-8") as f:
        return json.load(f).get("meta", {})


def select(params: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Parameters whose dotted name starts with ``prefix`` (e.g. ``"hfp."``)."""
    return {k: v for k, v in params.items() if k.startswith(prefix)}

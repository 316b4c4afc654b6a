"""Run manifests: enough to reproduce a command (config, seeds, input and output hashes)."""

import hashlib
import json
import logging
import os
from typing import Any, Dict, Iterable, List

logger = logging.getLogger(__name__)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tree_files(root: str) -> List[str]:
    """Every file under ``root`` (or ``root`` itself), sorted."""
    if os.path.isfile(root):
        return [root]
    found = []
    for dirpath, _, names in os.walk(root):
        found.extend(os.path.join(dirpath, n) for n in names)
    return sorted(found)


def hash_paths(paths: Iterable[str], relative_to: str) -> Dict[str, str]:
    hashes: Dict[str, str] = {}
    for path in paths:
        for f in tree_files(path):
            hashes[os.path.relpath(f, relative_to)] = sha256_file(f)
    return hashes


def write_manifest(workdir: str, command: str, payload: Dict[str, Any]) -> str:
    path = os.path.join(workdir, f"{command}.manifest.json")
    os.makedirs(workdir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"command": command, **payload}, f, indent=2, sort_keys=True)
    logger.debug("Wrote manifest %s", path)
    return path

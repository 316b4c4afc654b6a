import os

import numpy as np
import pytest

from app.errors import MissingArtifactError
from app.services.checkpoint import checkpoint_paths, load_checkpoint, load_meta, save_checkpoint, select
from app.services.manifest import hash_paths, write_manifest


def test_round_trip(tmp_path, smoke_params):
    stem = str(tmp_path / "ckpt" / "ucf")
    save_checkpoint(stem, smoke_params, {"stage": "ucf"})
    loaded = load_checkpoint(stem)
    assert sorted(loaded) == sorted(smoke_params)
    for name, value in smoke_params.items():
        assert loaded[name].shape == value.shape
        assert loaded[name].tobytes() == np.asarray(value, dtype=np.float64).tobytes()
    assert load_meta(stem) == {"stage": "ucf"}


def test_bytes_are_deterministic(tmp_path, smoke_params):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert save_checkpoint(a, smoke_params) == save_checkpoint(b, dict(reversed(list(smoke_params.items()))))
    with open(checkpoint_paths(a)[0], "rb") as fa, open(checkpoint_paths(b)[0], "rb") as fb:
        assert fa.read() == fb.read()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(str(tmp_path / "det"))
    with pytest.raises(MissingArtifactError):
        load_meta(str(tmp_path / "det"))


def test_select_by_prefix(smoke_params):
    hfp_only = select(smoke_params, "hfp.")
    assert hfp_only
    assert all(name.startswith("hfp.") for name in hfp_only)


def test_manifest_hashes_tree(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "x.bin").write_bytes(b"abc")
    hashes = hash_paths([str(tmp_path / "data")], str(tmp_path))
    assert list(hashes) == [os.path.join("data", "x.bin")]
    assert hashes[os.path.join("data", "x.bin")].startswith("ba7816bf")
    path = write_manifest(str(tmp_path), "gen", {"inputs": hashes})
    assert os.path.basename(path) == "gen.manifest.json"

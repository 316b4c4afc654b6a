import numpy as np
import pytest

from app.config import load_config
from app.services import hfp, ucf
from app.services.checkpoint import save_checkpoint
from app.services.detector import init_detector_params
from app.services.streams import build_corpus


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training-recipe tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def smoke_config():
    return load_config(preset="smoke")


@pytest.fixture
def val_streams(smoke_config):
    return build_corpus(smoke_config.streams, "val")


@pytest.fixture
def train_streams(smoke_config):
    return build_corpus(smoke_config.streams, "train")


def random_params(cfg, seed=3):
    """Untrained detector, hfp and ucf parameters at the config's shapes."""
    rng = np.random.default_rng(seed)
    s = cfg.streams
    params = init_detector_params(rng, s.d_img, s.d_pts, cfg.detector.hidden)
    params.update(hfp.init_all(rng, s.d_img, s.d_pts, s.height, s.width, cfg.membank.tau, cfg.hfp.K))
    params.update(ucf.init_ucf_params(rng, s.d_img, s.d_pts, cfg.ucf.K))
    return params


@pytest.fixture
def smoke_params(smoke_config):
    return random_params(smoke_config)


@pytest.fixture
def checkpoint_dir(tmp_path, smoke_params):
    """Cumulative det / hfp / ucf checkpoints from untrained parameters."""
    root = tmp_path / "checkpoints"
    save_checkpoint(str(root / "det"), {k: v for k, v in smoke_params.items() if k.startswith("det.")})
    save_checkpoint(str(root / "hfp"), {k: v for k, v in smoke_params.items() if k.startswith(("det.", "hfp."))})
    save_checkpoint(str(root / "ucf"), smoke_params)
    return str(root)


@pytest.fixture
def make_params():
    return random_params

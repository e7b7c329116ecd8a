import numpy as np
import pytest

from sampletag import data
from sampletag.model import build, toy_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_net(rng):
    """Depth-3 SE network on 81-sample inputs with 3 tags"""
    return build(toy_config('se'), rng, tags=['a', 'b', 'c'])


@pytest.fixture
def synth_small():
    return data.synth_generate(num_songs=30, num_tags=3, input_len=81, seed=7, segments_per_song=2)


@pytest.fixture
def synth_dir(tmp_path, synth_small):
    """Exported synthetic dataset; returns the manifest path"""
    return data.export_dataset(synth_small, str(tmp_path / "synth"))

import pytest
import torch

from umc.config import Config
from umc.models.collaborative_detector import build_param_specs
from umc.utils.checkpointing import ParamSet


# Two agents, a handful of objects and a short episode keep end-to-end tests fast.
SMALL_OVERRIDES = [
    "SCENARIO.NUM_AGENTS", 2,
    "SCENARIO.NUM_OBJECTS", 4,
    "SCENARIO.TIMESTEPS", 2,
]


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def small_config():
    return Config(None, SMALL_OVERRIDES)


@pytest.fixture
def small_params(small_config):
    _C = small_config
    specs = build_param_specs(
        bev_channels=8,
        bev_height=_C.BEV.SIZE[0],
        ladder=_C.LADDER,
        stem_channels=_C.ENCODER.STEM_CHANNELS,
        query_channels=_C.QUERY.CHANNELS,
        edge_channels=_C.EDGE.CHANNELS,
    )
    return ParamSet.random(specs, seed=_C.RANDOM_SEED)


@pytest.fixture
def small_config_yml(tmp_path):
    path = tmp_path / "small.yml"
    path.write_text(
        "SCENARIO:\n"
        "  NUM_AGENTS: 2\n"
        "  NUM_OBJECTS: 4\n"
        "  TIMESTEPS: 2\n"
    )
    return str(path)


@pytest.fixture
def make_config():
    def _make_config(*overrides):
        return Config(None, SMALL_OVERRIDES + list(overrides))

    return _make_config

import copy

import pytest

from llmpc.config import load_preset
from llmpc.sysdesc import accelerator_from_dict, system_from_dict


def preset(name: str) -> dict:
    return copy.deepcopy(load_preset("accelerators", name))


def make_system(accel: str = "a100-80gb", network=None):
    tree = preset(accel)
    tree["network"] = network or [{"kind": "switch", "size": 8, "link_bandwidth_Bps": 300e9}]
    return system_from_dict(tree)


@pytest.fixture
def a100():
    return accelerator_from_dict(preset("a100-80gb"))


@pytest.fixture
def a100_40():
    return accelerator_from_dict(preset("a100-40gb"))


@pytest.fixture
def a100_system():
    return make_system()

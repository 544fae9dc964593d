import numpy as np
import pytest
import torch

# Register your helper module for assertion rewriting
pytest.register_assert_rewrite("torch_pcmf.testing")

from torch_pcmf.counts import CountMatrix
from torch_pcmf.flags import slow_tests_enabled
from torch_pcmf.testing import random_counts


def pytest_collection_modifyitems(config, items):
    if slow_tests_enabled():
        return
    skip_slow = pytest.mark.skip(reason="set TORCH_PCMF_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_counts(rng) -> CountMatrix:
    return random_counts(rng, 8, 6)


@pytest.fixture(params=["gap", "zigap", "spcmf"])
def family_name(request) -> str:
    return request.param


@pytest.fixture(autouse=True)
def fixed_torch_threads(request):
    # matmul reductions depend on the thread count
    if request.node.get_closest_marker("all_threads"):
        yield
        return
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)

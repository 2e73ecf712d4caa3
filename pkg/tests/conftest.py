import sys

import numpy as np
import pytest
import torch

from atlasreg.phantom import PhantomSpec, make_atlas
from atlasreg.volumes import SamplingGrid

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantom48():
    spec = PhantomSpec(grid=SamplingGrid((48, 48, 48)))
    return spec, make_atlas(spec)


@pytest.fixture(scope="session")
def phantom32():
    spec = PhantomSpec(grid=SamplingGrid((32, 32, 32)), n_labels=2)
    return spec, make_atlas(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

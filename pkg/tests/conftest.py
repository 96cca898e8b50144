from __future__ import annotations

import numpy as np
import pytest
import torch

from homerun.gridworld import WorldSpec, generate_world
from homerun.worldmodel import PRESETS, WorldModel


@pytest.fixture(scope="session")
def world():
    return generate_world(WorldSpec(2, 2, 5, rng_seed=3))


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(0)
    return WorldModel(PRESETS["tiny"]).eval()


@pytest.fixture(scope="session")
def tiny_model64():
    torch.manual_seed(1)
    return WorldModel(PRESETS["tiny"]).double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    ran = any("test_acceptance" in str(getattr(r, "nodeid", "")) for rs in terminalreporter.stats.values() for r in rs)
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in acceptance_report.lines():
        terminalreporter.write_line(line)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reclogit import Scenario, toy_fixture


@pytest.fixture(scope="session")
def toy():
    return toy_fixture()


@pytest.fixture(scope="session")
def toy_data(toy):
    return [
        Scenario(toy.graph, toy.features, toy.trajectories_before, "before"),
        Scenario(toy.graph_removed, toy.features_removed, toy.trajectories_after, "after"),
    ]


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)

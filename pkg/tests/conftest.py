import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from interacting_bridges.graph_linalg import ConductanceMatrix, ModelParams  # noqa: E402
from interacting_bridges.rand_dist import RngStream  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_environment(tmp_path, monkeypatch):
    """Logs go to tmp_path and no seed / database comes from the environment."""
    monkeypatch.setenv('INTERACTING_BRIDGES_LOG_DIR', str(tmp_path / 'log'))
    monkeypatch.delenv('INTERACTING_BRIDGES_SEED', raising=False)
    monkeypatch.delenv('INTERACTING_BRIDGES_DB', raising=False)


@pytest.fixture
def two_vertex():
    return ModelParams(ConductanceMatrix(np.array([[0.0, 1.0], [1.0, 0.0]])), np.ones(2), np.ones(2))


@pytest.fixture
def one_vertex():
    return ModelParams(ConductanceMatrix(np.zeros((1, 1))), np.array([1.0]), np.array([1.0]))


@pytest.fixture
def three_vertex_path():
    return ModelParams.from_dict({
        'n': 3,
        'edges': [[0, 1, 0.5], [1, 2, 0.5]],
        'theta': [1.0, 1.5, 1.0],
        'eta': [1.0, 0.5, 1.0],
    })


@pytest.fixture
def stream():
    return RngStream(12345, 7)

import os

import numpy as np
import pytest
import torch

CURRENT_FOLDER = os.path.dirname(os.path.abspath(__file__))


def pytest_sessionstart():
    from flexisurf.logger import logger, handler

    logger.removeHandler(handler)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def sphere_grid():
    from flexisurf.grid import ScalarGrid

    return ScalarGrid.sphere(16, 0.5)

from pathlib import Path

import numpy as np
import pytest

from sira.streamline import streamline
from sira.zoo import fc_lowered_graph, fc_ranges

MODELS_DIR = Path(__file__).resolve().parent.parent / "models"


@pytest.fixture
def models_dir():
    return MODELS_DIR


@pytest.fixture
def layer():
    return fc_lowered_graph()


@pytest.fixture
def layer_ranges():
    return fc_ranges()


@pytest.fixture
def streamlined(layer, layer_ranges):
    g, _ = streamline(layer, layer_ranges)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

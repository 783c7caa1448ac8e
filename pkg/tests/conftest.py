import numpy as np
import pytest

from iptdet.dataset import ClassMap


@pytest.fixture
def class_map():
    return ClassMap(("vibrato", "tremolo", "glissando"), (60, 71))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

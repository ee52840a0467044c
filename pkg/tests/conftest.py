import numpy as np
import pytest

from labelprop.core.config import SynthConfig
from labelprop.imagery import Frame, LabelMap


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def random_frame(rng):
    def make(height=8, width=8):
        return Frame(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))

    return make


@pytest.fixture
def two_tone():
    """Left half red / class 0, right half blue / class 1, on a 12x12 grid."""
    data = np.zeros((12, 12, 3), dtype=np.uint8)
    data[:, :6] = (220, 30, 30)
    data[:, 6:] = (30, 30, 220)
    labels = np.zeros((12, 12), dtype=np.uint8)
    labels[:, 6:] = 1
    return Frame(data), LabelMap(labels, 2)


@pytest.fixture
def tiny_synth():
    return SynthConfig(
        width=16,
        height=16,
        num_objects=1,
        min_speed=1,
        max_speed=1,
        min_object_size=4,
        max_object_size=6,
        noise_sigma=4.0,
        num_frames=4,
        num_sequences=2,
        num_val_sequences=1,
        seed=3,
    )

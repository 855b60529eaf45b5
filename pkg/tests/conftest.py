import numpy as np
import pytest

from aspcnet.dataio import LabelRaster, make_synthetic_scene
from aspcnet.tensor import precision


@pytest.fixture
def f64():
    """Run the test body with 64-bit default tensors."""
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return make_synthetic_scene()


@pytest.fixture
def small_labels():
    """9-class raster: an unlabeled first and last row, 60 pixels per class between."""
    lab = np.zeros((20, 30), dtype=np.int64)
    cells = np.repeat(np.arange(1, 10), 60)
    lab.reshape(-1)[30:30 + cells.size] = cells
    return LabelRaster(lab, 9)

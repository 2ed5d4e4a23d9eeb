import numpy as np
import pytest

from kevs.grids import BinaryMask, GridGeometry, LabelMap, LabelSchema, ScalarVolume


@pytest.fixture
def geom222():
    return GridGeometry((2, 2, 2), (1.0, 1.0, 1.0))


@pytest.fixture
def schema_basic():
    return LabelSchema({
        "sat": 1,
        "abdominal_cavity": 2,
        "vertebra_L3": 5,
        "organ:liver": 10,
        "organ:spleen": 11,
    })


def make_mask(bits, spacing=(1.0, 1.0, 1.0)):
    bits = np.asarray(bits, dtype=bool)
    return BinaryMask(GridGeometry(bits.shape, spacing), bits)


def random_mask(rng, dims, p=0.3, spacing=(1.0, 1.0, 1.0)):
    return make_mask(rng.random(dims) < p, spacing=spacing)


def make_volume(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.float32)
    return ScalarVolume(GridGeometry(data.shape, spacing), data)


def make_labelmap(data, schema, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.int32)
    return LabelMap(GridGeometry(data.shape, spacing), data, schema)

import numpy as np
import pytest

from cxrcam import dataio


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """A 32x32 synthetic dataset with 20/10/10 images per class."""
    root = tmp_path_factory.mktemp("small_fixture")
    return dataio.gen_fixture(root, {"train": 20, "val": 10, "test": 10}, image_size=32, seed=0)


@pytest.fixture(scope="session")
def small_dataset(small_fixture):
    spec = dataio.PreprocessSpec(size=32, value_range="unit", channels=1)
    return {s: dataio.load_split(small_fixture, s, spec) for s in dataio.SPLITS}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def full_fixture(tmp_path_factory):
    """The default-sized 64x64 synthetic dataset: 200/50/50 images per class."""
    root = tmp_path_factory.mktemp("full_fixture")
    return dataio.gen_fixture(root, {"train": 200, "val": 50, "test": 50}, image_size=64, seed=0)


@pytest.fixture(scope="session")
def full_dataset(full_fixture):
    spec = dataio.PreprocessSpec(size=64, value_range="unit", channels=1)
    return {s: dataio.load_split(full_fixture, s, spec) for s in dataio.SPLITS}


@pytest.fixture(scope="session")
def confound_fixture(tmp_path_factory):
    """The full-sized dataset with the corner marker on every NORMAL image."""
    root = tmp_path_factory.mktemp("confound_fixture")
    return dataio.gen_fixture(root, {"train": 200, "val": 50, "test": 50}, image_size=64,
                              seed=0, with_confound=True)

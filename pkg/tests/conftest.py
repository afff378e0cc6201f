import numpy as np
import pytest

from partforge.augment import CaptionTemplate
from partforge.library import DEFAULT_SCHEMAS, build_synthetic_library


@pytest.fixture(scope="session")
def synth_library():
    return build_synthetic_library(seed=0, point_count=512)


@pytest.fixture(scope="session")
def small_library():
    return build_synthetic_library(seed=1, point_count=64)


@pytest.fixture(scope="session")
def schemas():
    return [make() for _, make in sorted(DEFAULT_SCHEMAS.items())]


@pytest.fixture(scope="session")
def template():
    return CaptionTemplate()


@pytest.fixture()
def rng():
    return np.random.default_rng(42)

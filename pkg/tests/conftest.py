import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from voxcodec.weights import entropy_models, make_weights


@pytest.fixture(scope="session")
def store():
    return make_weights(0)


@pytest.fixture(scope="session")
def models(store):
    return entropy_models(store)


@pytest.fixture(scope="session")
def surrogate_store():
    return make_weights(0, profile="surrogate")


@pytest.fixture(scope="session")
def surrogate_models(surrogate_store):
    return entropy_models(surrogate_store)

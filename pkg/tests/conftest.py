import numpy as np
import pytest

from chunkcast.engine import Engine, EngineConfig
from chunkcast.store import StoreConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture
def engine():
    eng = Engine(EngineConfig(stores=StoreConfig(ram_capacity=1 << 26)))
    yield eng
    eng.close()


def make_engine(ram=1 << 26, **kw):
    stores = kw.pop("stores", None) or StoreConfig(ram_capacity=ram)
    return Engine(EngineConfig(stores=stores, **kw))

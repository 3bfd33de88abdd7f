import numpy as np
import pytest

from ttdioc.costmodel import TruthProfile, squared_features
from ttdioc.dynamics import SystemModel
from ttdioc.experiments import build_dataset, default_spec


@pytest.fixture(scope="session")
def spring1_model():
    return SystemModel("spring1", ts=0.1)


@pytest.fixture(scope="session")
def spring1_features(spring1_model):
    return squared_features(spring1_model)


@pytest.fixture(scope="session")
def spring1_const_spec():
    return default_spec("spring1", TruthProfile("constant", value=2.0), seed=3)


@pytest.fixture(scope="session")
def spring1_const_ds(spring1_const_spec):
    return build_dataset(spring1_const_spec)


@pytest.fixture(scope="session")
def spring1_trig_spec():
    return default_spec("spring1", TruthProfile("trig"), seed=3)


@pytest.fixture(scope="session")
def spring1_trig_ds(spring1_trig_spec):
    return build_dataset(spring1_trig_spec)

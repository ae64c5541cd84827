import numpy as np
import pytest

from sparsepc.data import gen_dataset
from sparsepc.net import TrainConfig, train

# filled by test_acceptance; printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def small_data():
    return gen_dataset(per_class=12, n_points=64, seed=0)


@pytest.fixture(scope="session")
def small_clf(small_data):
    """A quick half-width net; accurate enough to give meaningful gradients and margins."""
    return train(small_data, TrainConfig(epochs=10, arch="maxpool_half", seed=0))


@pytest.fixture(scope="session")
def small_avg_clf(small_data):
    return train(small_data, TrainConfig(epochs=10, arch="avgpool", seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def correct_test_clouds(small_data, small_clf):
    return [c for c in small_data.test if small_clf.predict_one(c.points) == c.label]

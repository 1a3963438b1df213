import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cbv.data import make_shapes  # noqa: E402
from cbv.encoders import TrainConfig, train_classifier, train_dual_encoder  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data():
    return make_shapes(40, seed=7)


@pytest.fixture(scope="session")
def small_enc(small_data):
    return train_dual_encoder(small_data, TrainConfig(epochs=8, seed=0))


@pytest.fixture(scope="session")
def small_clf(small_data):
    return train_classifier(small_data, TrainConfig(epochs=30, seed=0))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])

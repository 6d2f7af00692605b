import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    # keep CPU runs reproducible and fair on shared hardware
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: training-based acceptance runs (minutes each)"
    )
    config.addinivalue_line(
        "markers", "ucihar: requires the raw UCIHAR dataset via MATE_UCIHAR_DIR"
    )

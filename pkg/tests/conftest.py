import numpy as np
import pytest
import torch

from csidiff.data import ChannelConfig, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_channel():
    return ChannelConfig()


@pytest.fixture(scope="session")
def small_dataset():
    """Sixteen preprocessed samples with raw matrices and side info."""
    return generate_dataset(ChannelConfig(seed=7), 16, "train")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed as one line per criterion after the run
VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, name, passed, detail=""):
        VERDICTS[number] = (name, bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        name, passed, detail = VERDICTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status} {name}: {detail}")

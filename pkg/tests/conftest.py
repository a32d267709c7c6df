import numpy as np
import pytest

from dcap import numkit as nk


@pytest.fixture
def f64():
    with nk.precision(np.float64):
        yield


@pytest.fixture
def tiny():
    return tiny_dataset


def tiny_dataset(classes_per_split=(6, 3, 3), per_class=20, size=16, channels=1, seed=0):
    """Random-pixel dataset for sampler and pipeline plumbing tests."""
    from dcap.episodes import SPLITS, Dataset
    rng = np.random.default_rng(seed)
    n = sum(classes_per_split)
    images = rng.integers(0, 256, (n * per_class, size, size, channels), dtype=np.uint8)
    labels = np.repeat(np.arange(n), per_class)
    splits = sum(([s] * c for s, c in zip(SPLITS, classes_per_split)), [])
    return Dataset(images, labels, tuple(f"k{i:02d}" for i in range(n)), tuple(splits), name="tiny")


ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from crossfeat.features import AlgorithmId, FeatureSet


def random_set(rng, k=20, n=8, width=640, height=480, detector="detA", descriptor="descA", ids=False,
               image_id="img"):
    kp = np.column_stack([
        rng.uniform(0, width, k), rng.uniform(0, height, k), rng.uniform(1, 20, k),
        rng.uniform(-np.pi, np.pi, k), rng.uniform(0, 1, k),
    ])
    d = rng.normal(size=(k, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lids = np.arange(k) if ids else None
    return FeatureSet(image_id, width, height, AlgorithmId(detector, descriptor, n), kp, d, lids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


# acceptance verdicts, echoed at the end of the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

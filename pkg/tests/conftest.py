import numpy as np
import pytest

from p2be.datasets import make_patterns
from p2be.training import TrainConfig, train

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    X, y = make_patterns(256, 4, 8, seed=3)
    Xt, yt = make_patterns(128, 4, 8, seed=4)
    return X, y, Xt, yt


@pytest.fixture(scope="session")
def trained_p2be(toy_data):
    X, y, _, _ = toy_data
    cfg = TrainConfig(epochs=25, dim=16, encoder="p2be", seed=0)
    return train(cfg, X, y)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

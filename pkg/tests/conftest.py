import numpy as np
import pytest

from interpfool.data import Dataset
from interpfool.model import build_model, init_params, smallnet


def make_net(seed=0, input_shape=(1, 12, 12), widths=(4, 6, 8), num_classes=5, bias=True, dtype=np.float64):
    model = build_model(smallnet(num_classes, input_shape, widths, bias))
    params = init_params(model, seed, dtype=dtype)
    return model, params


@pytest.fixture
def tiny_net():
    return make_net()


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 1, 12, 12))
    y = np.arange(12) % 5
    return Dataset(x, y, 5)


# Acceptance results are collected here and echoed in the terminal summary,
# one PASS/FAIL line per criterion, so they survive output capturing.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

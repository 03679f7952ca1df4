import numpy as np
import pytest

from specfed.config import parse_config

# (criterion number, PASS/FAIL line) appended by the acceptance suite
ACCEPTANCE = []


def tiny_raw(task="classification", **fed):
    federation = {"num_clients": 3, "rounds": 2, "lambda": 0.1, "top_k": 2, "batch_size": 8, "lr": 0.02}
    federation.update(fed)
    return {
        "seed": 0,
        "data": {"task": task, "image_size": 16, "num_samples": 48, "test_fraction": 0.25,
                 "partition": {"mode": "disjoint"}},
        "model": {"patch_size": 4, "dim": 8, "depth": 1, "tokenizer_hidden": 8},
        "federation": federation,
        "output": {"curves": True, "checkpoint": True},
    }


@pytest.fixture
def tiny_config():
    def make(task="classification", **fed):
        return parse_config(tiny_raw(task, **fed))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from read_forge.backbone import Backbone, BackboneConfig, load_preset


@pytest.fixture(scope="session")
def tiny_config() -> BackboneConfig:
    return load_preset("tiny")


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config) -> Backbone:
    return Backbone.init(tiny_config, seed=0)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(7)
    X = rng.integers(3, 16, (2, 5))
    Y = rng.integers(3, 16, (2, 4))
    return X, Y


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)

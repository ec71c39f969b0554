import numpy as np
import pytest

from esproto.episodes import prepare_dataset
from esproto.nncore import EmbeddingNet, init_params
from esproto.synthetic import write_raw_tree

SMALL_CHARACTERS = 40  # -> 160 classes: 118 train / 25 val / 17 test

_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_raw(tmp_path_factory):
    return write_raw_tree(tmp_path_factory.mktemp("raw"), alphabets=4,
                          characters_per_alphabet=10, seed=3)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, small_raw):
    out = tmp_path_factory.mktemp("cache")
    tables = prepare_dataset(small_raw, out, seed=7, expected_characters=SMALL_CHARACTERS)
    return out, tables


@pytest.fixture(scope="session")
def net16():
    return EmbeddingNet(channels=16)


@pytest.fixture(scope="session")
def params16(net16):
    return init_params(net16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

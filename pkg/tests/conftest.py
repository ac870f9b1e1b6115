import json
from pathlib import Path

import numpy as np
import pytest
import torch

from sspiwo.tabular import TabularModel, load_fixture

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def golden_fix_a():
    return json.loads((GOLDEN / "fix_a.json").read_text())


@pytest.fixture(scope="session")
def golden_syn_a():
    return json.loads((GOLDEN / "syn_a.json").read_text())


@pytest.fixture
def fix_a():
    return load_fixture("fix_a")


@pytest.fixture
def random_model():
    return TabularModel.random(np.random.default_rng(7), n_y=3, n_z=2, n_x=4)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

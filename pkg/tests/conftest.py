import pytest
import torch

from affunet.geometry import load_bundled_head
from affunet.tensor import set_determinism

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_determinism(1)


@pytest.fixture(scope="session")
def head():
    return load_bundled_head()


@pytest.fixture(scope="session")
def tiny_toyset(head):
    from affunet.toyset import make_toyset

    return make_toyset(12, seed=5, res=64, n_heldout=4, template=head)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import pytest

from fedsilo.data import ClientDataset
from fedsilo.model import ModelSpec, init_params
from fedsilo.numkit import Rng


@pytest.fixture
def tiny_spec():
    return ModelSpec((3, 5, 4))


@pytest.fixture
def tiny_params(tiny_spec):
    return init_params(tiny_spec, Rng(7))


def make_client(cid, n, d=3, C=4, seed=0):
    gen = Rng(seed).stream("test-client", cid)
    return ClientDataset(cid, gen.standard_normal((n, d)), gen.integers(0, C, n), f"c{cid}")


@pytest.fixture
def clients():
    return [make_client(i, n) for i, n in enumerate((60, 45, 30))]


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

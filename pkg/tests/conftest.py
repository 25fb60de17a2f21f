import pytest

from pqadv import pqgen
from pqadv.nnet import AdamConfig, NetworkModel, train


@pytest.fixture(scope="session")
def tiny_data():
    """A 17 x 12 signal dataset: big enough for every stage, small enough to be quick."""
    ds = pqgen.build_dataset(12, 30.0, seed=11)
    return ds, ds.arrays("train"), ds.arrays("test")


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    _, (X, y), _ = tiny_data
    model = NetworkModel(seed=11)
    model, _ = train(model, X, y, AdamConfig(epochs=3, batch_size=32), seed=11)
    return model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

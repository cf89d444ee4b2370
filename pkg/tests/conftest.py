import gzip
from importlib import resources

import numpy as np
import pytest

from milforge.data import load_mnist, write_idx


def _mnist_sample():
    mlxtend = pytest.importorskip("mlxtend")
    src = resources.files(mlxtend) / "data" / "data" / "mnist_5k.csv.gz"
    with src.open("rb") as raw, gzip.open(raw, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.uint8)
    return table[:, :784].reshape(-1, 28, 28), table[:, 784]


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """IDX files for the 5,000-digit MNIST sample."""
    images, labels = _mnist_sample()
    out = tmp_path_factory.mktemp("mnist")
    write_idx(out / "train-images-idx3-ubyte.gz", images)
    write_idx(out / "train-labels-idx1-ubyte.gz", labels)
    return out


@pytest.fixture(scope="session")
def mnist_arrays(mnist_dir):
    return load_mnist(mnist_dir / "train-images-idx3-ubyte.gz", mnist_dir / "train-labels-idx1-ubyte.gz")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return the outcome."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

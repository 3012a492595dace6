import numpy as np
import pytest

from trellisnet import data

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_idx_dir(tmp_path_factory):
    """A 2000/1000 train/test split of the mlxtend MNIST sample written as IDX files."""
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    X, y = X[order].reshape(-1, 28, 28).astype(np.uint8), y[order].astype(np.uint8)
    out = tmp_path_factory.mktemp("mnist")
    for (img, lbl), sl in ((("train-images-idx3-ubyte", "train-labels-idx1-ubyte"), slice(0, 2000)),
                           (("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"), slice(2000, 3000))):
        data.write_idx(out / img, X[sl])
        data.write_idx(out / lbl, y[sl])
    return out

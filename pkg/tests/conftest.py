import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from anderson_nn.mnist_io import Dataset, one_hot  # noqa: E402

DEFAULT_DATA_DIR = "/root/data/mnist"


def mnist_dir():
    d = os.environ.get("ANDERSON_NN_DATA_DIR", DEFAULT_DATA_DIR)
    return d if os.path.exists(os.path.join(d, "train-images-idx3-ubyte")) or \
        os.path.exists(os.path.join(d, "train-images-idx3-ubyte.gz")) else None


@pytest.fixture(scope="session")
def data_dir():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST files not found; set ANDERSON_NN_DATA_DIR")
    return d


def synthetic_dataset(n=40, n_in=784, seed=0, n_classes=10):
    """Random images whose class shifts the mean of one pixel block, so a net can learn it."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n)
    X = rng.random((n_in, n)) * 0.2
    block = n_in // n_classes
    for j, lab in enumerate(labels):
        X[lab * block:(lab + 1) * block, j] += 0.8
    return Dataset(inputs=X, targets_onehot=one_hot(labels, n_classes), labels=labels)


@pytest.fixture
def tiny_dataset():
    return synthetic_dataset()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

from pathlib import Path

import numpy as np
import pytest

from scalevec import data, kernels

DATA = Path(__file__).parent / "data"
IMAGES = DATA / "mnist200-images-idx3-ubyte"
LABELS = DATA / "mnist200-labels-idx1-ubyte"


@pytest.fixture(scope="session")
def digits():
    """200 real MNIST digits (20 per class) as float64 in [0, 1], with labels."""
    return data.read_idx(IMAGES), data.read_idx(LABELS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    before = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(before)


_ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance line; printed at the end of the run."""
    _ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])

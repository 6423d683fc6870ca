import contextlib
import sys

import numpy as np
import pytest

from loramerge import _numpy_kernels, linalg

try:
    from loramerge import _numba_kernels
except ImportError:  # pragma: no cover
    _numba_kernels = None

BACKENDS = {"numpy": _numpy_kernels}
if _numba_kernels is not None:
    BACKENDS["numba"] = _numba_kernels


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    monkeypatch.setattr(linalg, "KERNELS", BACKENDS[request.param])
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@contextlib.contextmanager
def using(name):
    """Temporarily route linalg through one kernel module (usable inside hypothesis tests)."""
    saved = linalg.KERNELS
    linalg.KERNELS = BACKENDS[name]
    try:
        yield
    finally:
        linalg.KERNELS = saved


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

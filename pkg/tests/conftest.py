import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from heartlang import _kernels_py, kernels

from helpers import VERDICTS

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

KERNEL_NAMES = ("repair_lead", "local_maxima", "scan_peaks", "midranks",
                "segment_sum", "varint_encode", "varint_decode")

try:
    from heartlang import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

BACKENDS = ["python"] + (["cython"] if _compiled is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Route every kernel call through one implementation for the duration of a test."""
    impl = _compiled if request.param == "cython" else _kernels_py
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])

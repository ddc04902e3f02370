import numpy as np
import pytest

from isa_fss import _kernels_py, kernels

try:
    from isa_fss import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    BACKENDS["cython"] = _kernels_c


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Run the test once per available im2col/col2im backend."""
    module = BACKENDS[request.param]
    monkeypatch.setattr(kernels, "im2col", module.im2col)
    monkeypatch.setattr(kernels, "col2im", module.col2im)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pretrained():
    from isa_fss.bench.ablation import BenchmarkConfig, pretrained_model

    return pretrained_model(BenchmarkConfig())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from dynamixer import kernels
from dynamixer.tensor import Tensor


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def scramble(weights, rng, std=0.3):
    """Redraw every parameter so mixing matrices are far from uniform."""
    from dynamixer.mixer import named_parameters

    for name, t in named_parameters(weights):
        noise = std * rng.standard_normal(t.shape)
        t.data = 1.0 + noise if name.endswith("gain") else noise
    return weights


# -- acceptance report ----------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    _criteria[number] = (title, report.passed, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, detail, duration = _criteria[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} {status}  {title} [{duration:.1f}s]"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))

import numpy as np
import pytest

from sfpa.rf import AcquisitionGeometry, FrameStack, RfFrame


@pytest.fixture
def small_geometry():
    return AcquisitionGeometry(n_elements=16, n_samples=256, n_frames=8, sample_rate=20e6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def constant_stack(geometry, values, **kw):
    frames = tuple(RfFrame(np.full(geometry.shape, float(v)), geometry) for v in values)
    return FrameStack(frames, **kw)


# -- acceptance summary ---------------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _CRITERIA.get(number, (title, True))
        _CRITERIA[number] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")

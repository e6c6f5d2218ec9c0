import numpy as np
import pytest

# criterion number -> [title, passed, notes]
_VERDICTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if marker is not None:
            _VERDICTS.setdefault(marker.args[0], [marker.args[1], True, []])[2].append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "call" or report.failed or report.skipped:
        entry = _VERDICTS.setdefault(marker.args[0], [marker.args[1], True, []])
        entry[1] = entry[1] and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, ok, notes = _VERDICTS[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}"
        if notes:
            line += ": " + "; ".join(notes)
        terminalreporter.write_line(line)

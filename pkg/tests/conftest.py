import re

import pytest
import torch

torch.set_num_threads(1)

_RESULTS: dict[str, list[str]] = {}
_VALUES: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _RESULTS.setdefault(label, []).append(report.outcome)
    if report.when == "call":
        _VALUES.setdefault(label, []).extend(f"{k}={v}" for k, v in report.user_properties)


def _order(label):
    m = re.match(r"(\d+)", label)
    return (m is None, int(m.group(1)) if m else 0, label)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS, key=_order):
        status = "PASS" if all(o == "passed" for o in _RESULTS[label]) else "FAIL"
        values = ", ".join(_VALUES.get(label, []))
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{values}]" if values else ""))

import socket
import time

import pytest

from auditmatch.fixtures import make_promotion_fixture, make_synthetic

SUITE_BUDGET_S = 60.0
_acceptance: list[tuple[str, str]] = []
_started = time.perf_counter()


@pytest.fixture(autouse=True)
def _no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise RuntimeError("network access attempted during tests")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


@pytest.fixture(scope="session")
def small_fixture():
    return make_synthetic(n_reports=10, segments_per_report=20, n_requirements=20, seed=0)


@pytest.fixture(scope="session")
def promotion_fixture():
    return make_promotion_fixture()


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _acceptance.append((name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, outcome in _acceptance:
        tr.write_line(f"{outcome}  {name}")
    elapsed = time.perf_counter() - _started
    outcome = "PASS" if elapsed < SUITE_BUDGET_S else "FAIL"
    tr.write_line(f"{outcome}  offline_suite_under_60s ({elapsed:.1f}s, network blocked)")

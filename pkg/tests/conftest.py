from __future__ import annotations

import pytest

from hetcomm.topology import make_topology, reference_testbed
from hetcomm.world import World


@pytest.fixture(scope="session")
def testbed():
    return reference_testbed()


@pytest.fixture
def world(testbed):
    return World(testbed)


@pytest.fixture
def small_world():
    """One amd node and one nvidia node with two devices each."""
    return World(make_topology(["amd", "nvidia"], devices_per_node=2))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome; printed in the terminal summary."""
    number = request.node.get_closest_marker("criterion").args[0]
    detail = {"text": ""}
    yield detail
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    ACCEPTANCE[number] = (ok, detail["text"])
    print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail['text']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")

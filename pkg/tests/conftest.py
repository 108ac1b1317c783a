import numpy as np
import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record a named acceptance criterion; PASS only if the test body finishes."""
    state = {}

    def record(name, detail=""):
        state["name"] = name
        state["detail"] = detail
        _CRITERIA[name] = ("FAIL", detail)

    def note(detail):
        state["detail"] = detail
        if "name" in state:
            _CRITERIA[state["name"]] = ("FAIL", detail)

    record.note = note
    yield record
    if "name" in state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        _CRITERIA[state["name"]] = ("PASS" if ok else "FAIL", state["detail"])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: (int(s.split()[0].rstrip("ab.")), s)):
        status, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{status} {name}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

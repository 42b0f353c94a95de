import pytest

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion for the terminal summary."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    detail = {"text": ""}
    yield detail
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    _ACCEPTANCE.append((number, title, passed, detail["text"]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, text in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {title}" + (f" ({text})" if text else ""))

import re

import pytest

_OUTCOMES: dict[int, list] = {}
_NOTES: dict[int, list[str]] = {}
_TITLES: dict[int, str] = {}


def _criterion(nodeid: str):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", nodeid)
    return (int(m.group(1)), m.group(2).replace("_", " ")) if m else None


def pytest_runtest_logreport(report):
    found = _criterion(report.nodeid)
    if found is None:
        return
    num, title = found
    _TITLES.setdefault(num, title)
    if report.when == "call" or report.outcome != "passed":
        _OUTCOMES.setdefault(num, []).append(report.outcome)


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line of this criterion."""
    found = _criterion(request.node.nodeid)

    def add(text: str) -> None:
        if found:
            _NOTES.setdefault(found[0], []).append(text)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_OUTCOMES):
        outcomes = _OUTCOMES[num]
        status = "PASS" if all(o == "passed" for o in outcomes) else ("SKIP" if "skipped" in outcomes else "FAIL")
        detail = "; ".join(_NOTES.get(num, []))
        terminalreporter.write_line(f"criterion {num:2d} {status}  {_TITLES[num]}" + (f"  [{detail}]" if detail else ""))

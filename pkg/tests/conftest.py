from __future__ import annotations

import pytest

_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(name, passed, detail)`` records one acceptance line."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS[name] = (bool(passed), detail)
        print(f"{name} {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS, key=lambda k: int(k[2:])):
        ok, detail = _RESULTS[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")

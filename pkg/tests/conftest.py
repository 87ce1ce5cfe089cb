import pytest

_LINES: list[str] = []


def record_criterion(index: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    _LINES.append(f"criterion {index:2d}: {status} - {detail}")


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)

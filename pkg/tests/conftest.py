import pytest

_acceptance_lines: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line, then assert."""

    def report(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        _acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

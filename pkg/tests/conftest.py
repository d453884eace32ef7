"""Collects the acceptance verdicts and prints them after the run."""

VERDICTS = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    VERDICTS[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, passed, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip())

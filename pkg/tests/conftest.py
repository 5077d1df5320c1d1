"""Shared pytest hooks: the acceptance suite's one-line-per-criterion summary."""

CRITERIA = {}


def record(number, ok, detail):
    """Remember the outcome of acceptance criterion ``number``."""
    CRITERIA[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

"""Collects the acceptance suite's PASS/FAIL lines and prints them after the run."""

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool | None, detail: str) -> str:
    """Record one criterion; ``ok=None`` marks it as skipped."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"{status} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

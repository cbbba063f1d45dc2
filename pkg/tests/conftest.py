"""Collects the one-line verdicts of the acceptance suite and prints them at the end."""

VERDICTS: list[str] = []


def record(number: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  ({seconds:.1f} s)  {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)

import pytest

from acceptance_log import LINES


@pytest.fixture
def criterion():
    """Call with (number, passed, detail, seconds, limit) to log one line."""

    def log(number, passed, detail, seconds, limit):
        in_time = seconds < limit
        ok = passed and in_time
        LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}  "
                     f"[{seconds:.1f}s of {limit:.0f}s]")
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

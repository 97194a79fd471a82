import pytest

ACCEPTANCE = []


@pytest.fixture
def criterion(request, capsys):
    """Record one pass/fail line for an acceptance criterion.

    The test calls ``criterion(n, ok, detail)``; the line is printed at once and
    again in the terminal summary. ``ok=None`` marks the criterion skipped;
    otherwise the test fails when ``ok`` is false.
    """

    def record(number, ok, detail=""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"CRITERION {number:>2}: {status}  {detail}".rstrip()
        ACCEPTANCE.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        if ok is None:
            pytest.skip(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

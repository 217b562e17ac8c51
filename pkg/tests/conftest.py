import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criteria result lines after the run.

    The acceptance module records one PASS/FAIL line per criterion as it
    runs; stdout capture would otherwise hide them on success.
    """
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

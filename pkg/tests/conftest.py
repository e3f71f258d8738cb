"""Prints the acceptance summary at the end of a pytest run."""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.TITLES):
        if num in mod.RESULTS:
            terminalreporter.write_line(mod.RESULTS[num])
        else:
            terminalreporter.write_line(f"[{num:2d}] NOT RUN {mod.TITLES[num]}")

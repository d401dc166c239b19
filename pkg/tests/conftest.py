"""Echo the acceptance criterion verdicts after the test summary.

The acceptance tests print one line per criterion as they run, but pytest's
default fd-level capture swallows those prints. This hook replays them on
the terminal reporter, which always reaches the real output stream.
"""


import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = next((m for name, m in sys.modules.items()
                if name.rsplit(".", 1)[-1] == "test_acceptance"
                and hasattr(m, "CRITERION_RESULTS")), None)
    if mod is None or not mod.CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, desc, passed in sorted(mod.CRITERION_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {n}: {desc}")

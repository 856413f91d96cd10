import sys


def pytest_terminal_summary(terminalreporter):
    # show the per-criterion lines collected by the acceptance suite, if it ran
    module = sys.modules.get("test_acceptance")
    lines = module.summary_lines() if module is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # find the acceptance module instance pytest actually imported,
    # whichever import mode was used
    for name, module in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] != "test_acceptance":
            continue
        lines = getattr(module, "CRITERION_LINES", None)
        if lines:
            terminalreporter.section("acceptance criteria")
            for line in lines:
                terminalreporter.write_line(line)
            break

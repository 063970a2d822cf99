"""Shared pytest wiring: the acceptance-criteria summary block."""

ACCEPTANCE_RESULTS = []


def record_criterion(num: int, description: str, passed: bool) -> None:
    ACCEPTANCE_RESULTS.append((num, description, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, description, passed in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {num:2d}: {description}")

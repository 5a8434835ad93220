import re

_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(rep.nodeid)
            if m and rep.when == "call":
                detail = dict(rep.user_properties).get("detail", "")
                lines.append((int(m.group(1)), f"criterion {int(m.group(1)):2d} "
                                               f"{'PASS' if outcome == 'passed' else 'FAIL'}  {m.group(2)}: {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

# criterion number -> (passed, detail); filled by test_acceptance.py
CRITERIA: dict[int, tuple[bool | None, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        status = "REPORT" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")

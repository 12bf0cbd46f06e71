import pytest

# filled by test_acceptance: criterion number -> (passed, detail)
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(key, passed, detail):
        ACCEPTANCE[key] = (bool(passed), detail)
        print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<3} {'PASS' if ok else 'FAIL'}  {detail}")

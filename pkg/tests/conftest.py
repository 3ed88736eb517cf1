import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(k: int, ok: bool, detail: str) -> None:
        prev_ok, prev = ACCEPTANCE.get(k, (True, ""))
        ACCEPTANCE[k] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record

import pytest

# criterion id -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(key: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {key}: {detail}"

    return _record

import pytest

_CRITERIA: dict[int, list] = {}


@pytest.fixture
def criterion():
    """Record (passed, detail) for an acceptance criterion; summarised at the end of the run."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{d} [{'ok' if ok else 'FAIL'}]" for ok, d in parts)
        terminalreporter.write_line(f"CRITERION {n}: {status} | {detail}")

import pytest
import torch

torch.set_num_threads(1)

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """record(n, ok, detail): one pass/fail line per acceptance criterion, printed at the end."""
    def record(n: int, ok: bool, detail: str):
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")

import numpy as np
import pytest

ACCEPTANCE = []


def record_criterion(number, passed, detail):
    ACCEPTANCE.append((number, passed, detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

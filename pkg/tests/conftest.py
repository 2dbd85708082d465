import numpy as np
import pytest

from cqnas import autodiff as ad

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(n, passed, detail=""):
    ACCEPTANCE[n] = (bool(passed), detail)
    return passed


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

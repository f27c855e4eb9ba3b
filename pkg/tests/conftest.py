import numpy as np
import pytest

from gsfm import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def float64():
    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(old)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

import functools

import numpy as np
import pytest

from toothfuse.phantom import generate_phantom

ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")


@functools.lru_cache(maxsize=4)
def phantom(seed=0):
    return generate_phantom(seed)


@pytest.fixture(scope="session")
def scene():
    return phantom(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

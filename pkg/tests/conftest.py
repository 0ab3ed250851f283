import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from catsagg.engine import Tensor


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# criterion number -> list of (passed, description); filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        ok = all(passed for passed, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")

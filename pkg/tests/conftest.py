import numpy as np
import pytest

from trusslaw.design import seed_cells


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def seeds():
    return seed_cells()


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


VERDICTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line; the caller asserts ``ok``."""
    line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)

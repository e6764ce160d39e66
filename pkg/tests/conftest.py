import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def power_law_delta(m, n, exponent, rng, scale=0.01):
    """Random orthogonal factors with spectrum k**-exponent."""
    q = min(m, n)
    U, _ = np.linalg.qr(rng.standard_normal((m, q)))
    V, _ = np.linalg.qr(rng.standard_normal((n, q)))
    sigma = np.arange(1, q + 1, dtype=np.float64) ** -exponent
    return ((U * sigma) @ V.T * scale).astype(np.float32)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict = {}


def record(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

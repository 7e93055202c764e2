import numpy as np
import pytest
from scipy.linalg import solve_continuous_are

from delaysparse.model import LtiPlant, random_plant

# acceptance criteria register their verdicts here; printed at session end
CRITERIA = {}


def record(number: int, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def scalar_plant(a=-1.0, b=1.0, bw=1.0, q=1.0, r=1.0) -> LtiPlant:
    return LtiPlant(A=[[a]], B=[[b]], Bw=[[bw]], Q=[[q]], R=[[r]])


def lqr_gain(plant: LtiPlant) -> np.ndarray:
    X = solve_continuous_are(plant.A, plant.B, plant.Q, plant.R)
    return np.linalg.solve(plant.R, plant.B.T @ X)


def stable_random_plant(n, rng, m=None):
    """Random plant whose open loop is Hurwitz (K = 0 is stabilizing)."""
    while True:
        P = random_plant(n, m, rng=rng, shift=-1.5)
        if np.linalg.eigvals(P.A).real.max() < -0.1:
            return P


@pytest.fixture
def scalar():
    return scalar_plant()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

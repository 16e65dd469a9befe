import pytest

from mmsched import engine
from mmsched.calibration import calibrate
from mmsched.costmodel import ModelProfile

# every simulation in the test suite runs the KV and chunk-budget audits
engine.AUDIT = True


@pytest.fixture(scope="session")
def profile():
    return ModelProfile()


@pytest.fixture(scope="session")
def quiet_profile():
    return ModelProfile().without_noise()


@pytest.fixture(scope="session")
def default_calibration(profile):
    return calibrate(profile)


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE = {}
N_CRITERIA = 10


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "no verdict recorded"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

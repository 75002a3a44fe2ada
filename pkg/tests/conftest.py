import numpy as np
import pytest

from geomnet import spd


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def random_spd(n, rng, scale=1.0):
    return spd.random_spd(n, rng, scale=scale)


# acceptance criteria report: one line per criterion, shown after the run
ACCEPTANCE = {}


def record(criterion, passed, detail):
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"[{status}] criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=str):
            terminalreporter.write_line(ACCEPTANCE[key])

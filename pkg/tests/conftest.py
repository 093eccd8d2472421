import pytest

from rgmap import acquisition as acq
from rgmap.core import ContrastImageSet
from rgmap.phantom import KNEE_TSL_MS, knee_like, rasterize, synthesize


@pytest.fixture(scope="session")
def knee64():
    truth, labels = rasterize(knee_like(64, 64))
    return truth, labels, synthesize(truth, KNEE_TSL_MS)


@pytest.fixture(scope="session")
def knee_coils():
    return acq.make_coils(4, 64, 64, seed=1)


def undersample(series: ContrastImageSet, coils, r, seed=0):
    mask = acq.make_mask_set(*series.shape, series.n_tsl, r, seed=seed)
    op = acq.MeasurementOperator(coils, mask)
    return acq.forward(op, series)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    lines = getattr(test_acceptance, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

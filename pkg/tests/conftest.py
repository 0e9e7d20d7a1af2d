import numpy as np
import pytest

from pairspill.dgpfile import bundled_spec
from pairspill.ingest import Dataset
from pairspill.oracle import simulate


def make_dataset(z, d, y, x=None, ids=None):
    z = np.asarray(z)
    ids = ids if ids is not None else [f"h{k:03d}" for k in range(1, len(z) + 1)]
    return Dataset(np.array(ids, dtype=object), y, d, z, x)


@pytest.fixture
def hand_dataset():
    """Five households, every assignment cell populated, one-sided noncompliance.

    Unit-level cells: (0,0) y=1,2; (1,0) y=3,4 both treated; (0,1) y=1,2
    untreated with treated peers; (1,1) y=5,0,1,1 with d=1,1,0,0.
    """
    z = [[0, 0], [1, 0], [0, 1], [1, 1], [1, 1]]
    d = [[0, 0], [1, 0], [0, 1], [1, 1], [0, 0]]
    y = [[1.0, 2.0], [3.0, 1.0], [2.0, 4.0], [5.0, 0.0], [1.0, 1.0]]
    return make_dataset(z, d, y)


@pytest.fixture(scope="session")
def osn_data():
    spec = bundled_spec("osn_example").with_groups(4000, 11)
    return spec, simulate(spec)


@pytest.fixture(scope="session")
def strata_data():
    spec = bundled_spec("two_strata").with_groups(6000, 5)
    return spec, simulate(spec)



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])

import numpy as np
import pytest

from twostage.cohort import Cohort, Feature, FeatureSchema


def make_cohort(X, y, names=None, imaging=(), strata=None, ids=None):
    X = np.asarray(X, dtype=float)
    names = names or [f"f{j}" for j in range(X.shape[1])]
    schema = FeatureSchema(tuple(Feature(n, "numeric", "imaging" if n in imaging else "clinical")
                                 for n in names))
    ids = np.arange(len(y)).astype(str) if ids is None else ids
    return Cohort(schema, ids=ids, X=X, y=np.asarray(y), strata=strata or {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

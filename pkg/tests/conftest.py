import os

import numpy as np
import pytest

from flowplane.phantom import PhantomSpec, make_phantom


def pytest_collection_modifyitems(config, items):
    if os.environ.get("FLOWPLANE_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set FLOWPLANE_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def small_spec(**kw) -> PhantomSpec:
    base = dict(dims=(6, 32, 32, 32), spacing=(2.0, 2.0, 2.0), radius=5.0, origin=(18.0, 30.0, 30.0),
                direction=(1.0, 0.0, 0.0), length=30.0, noise=20.0)
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(small_spec(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, one line per criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])

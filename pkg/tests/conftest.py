import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flatcheck.geomkit import Workspace  # noqa: E402
from flatcheck.normalforms import crane_model  # noqa: E402
from flatcheck.pointlinalg import CheckConfig  # noqa: E402
from flatcheck.sfechk import check_tf1, model_fields  # noqa: E402

DEMOS = Path(__file__).resolve().parent.parent / "demos"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def crane():
    return crane_model()


@pytest.fixture(scope="session")
def crane_report(crane):
    return check_tf1(crane, CheckConfig(n_points=25, seed=42))


@pytest.fixture(scope="session")
def crane_ws(crane_report):
    return crane_report._ws


@pytest.fixture(scope="session")
def crane_fields(crane):
    return model_fields(crane)


def plane_ws(states, n=25, seed=0, lo=-1.0, hi=1.0, cfg=None):
    """Workspace of uniform random points for ad-hoc vector fields."""
    r = np.random.default_rng(seed)
    pts = {s: r.uniform(lo, hi, n) for s in states}
    return Workspace(states, pts, {}, cfg or CheckConfig(n_points=n, seed=seed))

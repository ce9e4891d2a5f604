import numpy as np
import pytest

from smcprc.models import TABLE1_ANNUAL, ClaimsTriangle


@pytest.fixture(scope="session")
def table1() -> ClaimsTriangle:
    """The reference run-off triangle ($10,000 units, cumulative)."""
    return ClaimsTriangle.from_annual(TABLE1_ANNUAL)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260814)

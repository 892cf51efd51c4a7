from __future__ import annotations

import pytest

from certgraph.certify import calibrate_all
from certgraph.pools import build_pools


@pytest.fixture(scope="session")
def pools():
    return build_pools(300, seed=5)


@pytest.fixture(scope="session")
def calibrators(pools):
    return calibrate_all(pools, 0.1)


@pytest.fixture(scope="session")
def standard_agent():
    """Calibrators on the default pools plus a policy trained with the default recipe."""
    from certgraph.bench import SuiteConfig, build_agent

    return build_agent(SuiteConfig())

import os

import pytest
from hypothesis import settings

from nested_mlmc.model import paper_model

settings.register_profile("default", deadline=None, max_examples=50)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def spec4():
    return paper_model(4)


@pytest.fixture(scope="session")
def spec1():
    return paper_model(1)


@pytest.fixture(scope="session")
def flat4():
    """Assets 2..d frozen: the inner batch carries no noise."""
    return paper_model(4, var_rest=0.0)


@pytest.fixture(scope="session")
def frozen4():
    """Every volatility zero."""
    return paper_model(4, var_first=0.0, var_rest=0.0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one ``criterion N: PASS|FAIL`` line per acceptance test."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

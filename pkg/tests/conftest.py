import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pgaopt import harness

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def surrogate_dir(tmp_path_factory):
    """Networks trained with the default settings on ~10k simulated rows."""
    out = tmp_path_factory.mktemp("surrogate")
    cfg = harness.config_from_dict({"domain": "dhs_surrogate", "seed": 0})
    report = harness.train_surrogate(cfg, out_dir=out)
    assert report["rows"] >= 10_000
    return out


@pytest.fixture(scope="session")
def surrogate_config(surrogate_dir):
    def make(**kw):
        data = {"domain": "dhs_surrogate", "surrogate": {"model_dir": str(surrogate_dir)}}
        data.update(kw)
        return harness.config_from_dict(data)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

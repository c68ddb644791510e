import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drafteu.config import config_from_dict

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# small enough to train in a few seconds, large enough to have covered and unseen keys
MINIMAL = {"vocab_size": 8, "context_window": 2, "target_family_size": 3, "n_queries": 20, "runs": 2,
           "strategy": {"kind": "ddd", "s": 2, "m": 3}}


@pytest.fixture
def minimal_cfg():
    return config_from_dict(MINIMAL)


def random_simplex(gen, v, alpha=1.0):
    p = gen.dirichlet(np.full(v, alpha))
    p = np.maximum(p, 1e-12)
    return p / p.sum()


# acceptance criteria report: one line per criterion, shown even when output is captured
ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

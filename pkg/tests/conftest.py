import numpy as np
import pytest

from robust_dpo.core import FeatureMap, PolicyParams, PreferenceDataset, PreferenceSample
from robust_dpo.policy import PolicyPair
from robust_dpo.verify import random_instance


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running study reproductions")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def instance(rng):
    return random_instance(rng, n=16, dim=4)


@pytest.fixture
def square_fm():
    """Two states, two actions; state 0 uses the unit axes."""
    table = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [-0.5, 0.0]]])
    return FeatureMap(table)


def make_pair(theta, ref=None, beta=1.0, bound=10.0):
    theta = np.asarray(theta, dtype=float)
    ref = np.zeros_like(theta) if ref is None else np.asarray(ref, dtype=float)
    return PolicyPair(PolicyParams(theta, bound), PolicyParams(ref, bound), beta)


def dataset(*rows):
    return PreferenceDataset.from_samples(PreferenceSample(*r) for r in rows)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one (criterion, passed, detail) line per acceptance criterion."""
    if not hasattr(request.config, "_acceptance_lines"):
        request.config._acceptance_lines = {}
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: int(k[1:])):
        passed, detail = lines[key]
        terminalreporter.write_line(f"{key:>3} {'PASS' if passed else 'FAIL'}  {detail}")

import numpy as np
import pytest
from hypothesis import settings

from dipw.data import Dataset, PropensityFit

settings.register_profile("dipw", max_examples=60, deadline=None)
settings.load_profile("dipw")

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Append ``(criterion, passed, detail)``; printed in the terminal summary."""
    log = request.config.stash[_ACCEPTANCE_KEY]

    def record(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        log.append((criterion, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE_KEY, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(log, key=lambda x: x[0]):
        terminalreporter.write_line(line)


@pytest.fixture
def tiny():
    """The four-row hand instance."""
    X = np.column_stack([np.ones(4), [0.1, -0.3, 0.7, 0.2]])
    data = Dataset(X, [1.0, 2.0, 3.0, 4.0], [1, 1, 0, 0])
    fit = PropensityFit.forced([0.5, 0.25, 0.5, 0.75])
    return data, fit


def random_instance(rng, n=None, p=None):
    n = n or int(rng.integers(4, 30))
    p = p or int(rng.integers(2, 6))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    T = np.zeros(n)
    T[: n // 2] = 1.0
    rng.shuffle(T)
    Y = rng.standard_normal(n) * 3.0
    pi = rng.uniform(0.05, 0.95, n)
    return Dataset(X, Y, T), PropensityFit.forced(pi)

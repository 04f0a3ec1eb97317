import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line: ``criterion(n, passed, detail)``."""
    verdicts = request.config.stash[_VERDICTS]

    def record(number: int, passed: bool, detail: str = "") -> bool:
        verdicts.append((number, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, [])
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(verdicts, key=lambda v: v[0]):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

import numpy as np
import pytest

from qsdfv.gw_model import binary_law, geometric_truncated_law


@pytest.fixture(scope="session")
def law():
    """Reference binary law: p(0) = 3/4, p(2) = 1/4."""
    return binary_law(0.75)


@pytest.fixture(scope="session")
def geo_law():
    return geometric_truncated_law(0.4, 6)


@pytest.fixture(scope="session")
def nu_geo():
    return (2 / 3) * (1 / 3) ** np.arange(400)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Log one ``CRITERION k: PASS|FAIL`` line, inline and in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _record(k: int, passed: bool, detail: str):
        line = f"CRITERION {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

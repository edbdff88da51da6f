import numpy as np
import pytest

from dilute_homog.domain import unit_ball, unit_box


@pytest.fixture
def ball():
    return unit_ball()


@pytest.fixture
def box():
    return unit_box()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> list of (part, passed, detail), filled by the acceptance module."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(log):
        parts = log[crit]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p + ' ' if p else ''}{'pass' if ok else 'FAIL'} ({d})" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {crit:2d}: {verdict}  {detail}")

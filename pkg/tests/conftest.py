import numpy as np
import pytest

from cscn.scenario import load_scenario, preset_config


@pytest.fixture(scope="session")
def desk():
    return load_scenario(preset_config("desk"))


def small_scenario(**kw):
    """Tiny scenario with pinned geometry for hand-checkable cases."""
    base = dict(num_sbs=1, num_users=1, num_contents=1, cp_antennas=1, sbs_antennas=1,
                num_patterns=1)
    base.update(kw)
    return load_scenario(preset_config("desk", **base))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

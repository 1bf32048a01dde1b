import sys

import numpy as np
import pytest

from pointermem import synth


@pytest.fixture(scope="session")
def static_frames():
    return synth.generate(synth.static_fixture())


@pytest.fixture(scope="session")
def dynamic_frames():
    return synth.generate(synth.dynamic_fixture())


@pytest.fixture(scope="session")
def revisit_frames():
    return synth.generate(synth.revisit_fixture())


@pytest.fixture(scope="session")
def overfit_frames():
    return synth.generate(synth.overfit_fixture())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402

from mivec.seqdata import generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_seq():
    return generate_synthetic(3, 4, 32, 32, 1.0, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fake_codec():
    return Path(__file__).parent / "fake_codec.py"


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.RESULTS):
        title, passed, detail = acceptance_log.RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {number:2d}. {title}: {detail}")

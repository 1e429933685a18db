import sys
from pathlib import Path

import numpy as np
import pytest

from ered.gmm import GmmPrior, random_prior

HERE = Path(__file__).parent


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def asym_prior():
    return random_prior(np.random.default_rng(7), 4, 3, spread=1.0, shape=(2, 2))


@pytest.fixture
def single_gaussian():
    return GmmPrior([1.0], [[0.0, 0.0]], [1.0])


@pytest.fixture
def wrong_dims_server(tmp_path):
    """A child that answers every frame with a 1x1x1 payload."""
    script = tmp_path / "wrong_dims.py"
    script.write_text(
        "import sys\n"
        "import numpy as np\n"
        "from ered.ednz import read_frame, write_frame\n"
        "while (f := read_frame(sys.stdin.buffer)) is not None:\n"
        "    write_frame(sys.stdout.buffer, np.zeros((1, 1, 1)), f[1])\n"
    )
    return [sys.executable, str(script)]


@pytest.fixture
def echo_server():
    return [sys.executable, "-m", "ered.ednz"]


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; repeated in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

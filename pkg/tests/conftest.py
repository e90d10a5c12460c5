import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from densebev.geometry import OrientedBoxBEV  # noqa: E402


def random_boxes(rng, n, dims=(0.2, 10.0), centers=(-20.0, 20.0)):
    """``(n, 5)`` rows of [cx, cy, w, l, yaw]."""
    return np.column_stack([
        rng.uniform(*centers, n), rng.uniform(*centers, n),
        rng.uniform(*dims, n), rng.uniform(*dims, n),
        rng.uniform(-math.pi, math.pi, n),
    ])


def to_box(row) -> OrientedBoxBEV:
    return OrientedBoxBEV(float(row[0]), float(row[1]), float(row[2]), float(row[3]), float(row[4]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)

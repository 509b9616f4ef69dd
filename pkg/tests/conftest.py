import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kakeyalab.constructions import ConstructionSpec, build
from kakeyalab.grid import VoxelGrid
from kakeyalab.maximal import kakeya_maximal

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def ball_fields():
    """Ball masks and their maximal fields at the acceptance scales, shared by several tests."""
    out = {}
    # h = delta/8 at 0.1; h = delta/4 (the coarsest allowed) keeps 0.05 tractable
    for delta, factor in ((0.1, 8), (0.05, 4)):
        grid = VoxelGrid.for_delta(3, delta, factor)
        m, _ = build(ConstructionSpec("ball", {"r": 1.0}), grid, delta)
        out[delta] = (m, kakeya_maximal(m, delta))
    return out


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion; printed in the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE_LINES[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[n])

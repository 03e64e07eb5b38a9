import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


NOISE_FREE = {
    "phantom": {"k_skin": float("inf")},
    "ultrasound": {"speckle_sigma": 0.0, "artifact_rate": 0.0},
    "needle": {"misalignment_sigma": 0.0},
    "evaluation": {"pick_noise_sigma": 0.0},
    "detection": {"voxel_resolution": 0.5},
}


@pytest.fixture(scope="session")
def default_report():
    """Default deformable config, both modes, 10 repetitions (shared by several tests)."""
    from autobx.config import default_config
    from autobx.evaluation import run_experiment

    return run_experiment(default_config(), seed=0)


@pytest.fixture(scope="session")
def noise_free_report():
    from autobx.config import default_config
    from autobx.evaluation import run_experiment

    t0 = time.perf_counter()
    rep = run_experiment(default_config(NOISE_FREE), seed=0, modes=("impedance",))
    rep.wall_time = time.perf_counter() - t0
    return rep


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

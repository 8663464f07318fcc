import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    import _ac
    if not _ac.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ac.RESULTS):
        terminalreporter.write_line(_ac.RESULTS[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def checker64():
    from voxelzip.synth import SceneSpec, generate_scene
    return generate_scene(SceneSpec.make("checker", 64))


@pytest.fixture(scope="session")
def harness():
    """The default harness scene: SceneSpec() (64^3 sphere shell, ~10% occupancy)."""
    from voxelzip.synth import SceneSpec, generate_scene
    return generate_scene(SceneSpec())


@pytest.fixture(scope="session")
def small_scene():
    from voxelzip.synth import SceneSpec, generate_scene
    return generate_scene(SceneSpec.make("sphere_shell", 16, occupancy=0.2, seed=3))

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatcodec.gs_model import GaussianCloud, rest_dim
from splatcodec.synth import ring_cameras, synth_scene

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_cloud(rng, n, degree=1):
    return GaussianCloud(
        positions=rng.normal(size=(n, 3)),
        quaternions=rng.normal(size=(n, 4)),
        log_scales=rng.normal(-3, 0.3, size=(n, 3)),
        opacity_logits=rng.normal(size=(n, 1)),
        sh_dc=rng.normal(size=(n, 3)),
        sh_rest=rng.normal(size=(n, rest_dim(degree))) * 0.1,
        sh_degree=degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    cloud = synth_scene(3000, seed=3)
    return cloud, ring_cameras(cloud, count=3, width=64, height=48, focal=60.0)

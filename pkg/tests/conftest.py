import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from detpipe.synth import SynthConfig, generate_synthetic_dataset

settings.register_profile(
    "detpipe", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("detpipe")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Twelve 32^3 cases, two classes, a quarter held out as test."""
    root = tmp_path_factory.mktemp("small_ds")
    cfg = SynthConfig(num_cases=12, dims=(32, 32, 32), objects_per_case=(1, 3), object_edge_range=(3, 8),
                      num_classes=2, seed=7, test_fraction=0.25)
    return generate_synthetic_dataset(cfg, root)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)

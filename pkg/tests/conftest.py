from pathlib import Path

import pytest

from adherence.simulation import SimulationContext
from adherence.synthetic import generate_synthetic_cohort

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts"


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(300, 5)


@pytest.fixture(scope="session")
def small_context(small_cohort):
    return SimulationContext(small_cohort)


@pytest.fixture(scope="session")
def artifacts_dir():
    ARTIFACTS.mkdir(exist_ok=True)
    return ARTIFACTS


@pytest.fixture(scope="session")
def cohort_10k():
    return generate_synthetic_cohort(10_000, 1)

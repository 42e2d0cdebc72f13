from __future__ import annotations

import pytest

from carina.model import GridFactor, MachineProfile
from carina.simulator import ReferenceSetup, reference_setup


@pytest.fixture
def example_profile() -> MachineProfile:
    """The 16-core host used throughout the contract examples."""
    return MachineProfile(
        host_id="example-host",
        logical_cores=16,
        nominal_workers=12,
        idle_power_w=80.0,
        per_worker_power_w=15.0,
        concurrency_power_exponent=0.35,
        contention_factor=0.005,
    )


@pytest.fixture
def grid() -> GridFactor:
    return GridFactor(region="us-mi-dte-derived", kg_co2e_per_kwh=0.4479)


@pytest.fixture(scope="session")
def oem1() -> ReferenceSetup:
    """Calibrated profile + workload for the first bundled measured run."""
    return reference_setup("oem1")


@pytest.fixture(scope="session")
def oem2() -> ReferenceSetup:
    return reference_setup("oem2")

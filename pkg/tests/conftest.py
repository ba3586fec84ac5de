import numpy as np
import pytest

from postureplan import geometry as geo
from postureplan import sim
from postureplan.distance_field import build_sdf, extrude_occupancy


@pytest.fixture(scope="session")
def model():
    return geo.RobotModel()


@pytest.fixture(scope="session")
def coeffs(model):
    return geo.coefficient_array(geo.generate_collision_points(model))


def exact_sdf(task, param, center=(0.0, 0.0)):
    world = sim.make_world(task, param)
    return build_sdf(extrude_occupancy(sim.snapshot_from_world(world, center=center)))


@pytest.fixture(scope="session")
def overhang_sdf():
    return exact_sdf("low-overhang", 0.225)


@pytest.fixture(scope="session")
def empty_sdf():
    return exact_sdf("high-clearance", 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])

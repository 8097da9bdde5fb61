import numpy as np
import pytest

from fcgrasp.geometry import icosphere, normalize_object_scale, prepare_object
from fcgrasp.gripper import load_gripper_spec


@pytest.fixture(scope="session")
def toy_sphere():
    """8 cm sphere at the default SDF resolution (the end-to-end fixture)."""
    mesh = normalize_object_scale(icosphere(1.0, 3))
    return prepare_object(mesh, name="sphere")


@pytest.fixture(scope="session")
def coarse_sphere():
    """Same sphere on a coarse grid, for tests that only need a valid object."""
    mesh = normalize_object_scale(icosphere(1.0, 3))
    return prepare_object(mesh, spacing=0.004, n_surface=500, name="sphere")


@pytest.fixture(scope="session")
def parallel_2f():
    return load_gripper_spec("parallel-2f")


@pytest.fixture(scope="session")
def trifinger():
    return load_gripper_spec("trifinger")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def report_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.setdefault(number, []).append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        for line in ACCEPTANCE[number]:
            terminalreporter.write_line(line)

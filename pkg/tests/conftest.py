import sys

import numpy as np
import pytest

from trisk_lts.harness import TestCaseConfig, build_fixture, init_tc5
from trisk_lts.mesh import generate_icosphere_mesh, generate_refined_mesh
from trisk_lts.regions import build_regions, cap_predicate


@pytest.fixture(scope="session")
def mesh0():
    """The 12-cell dual of the icosahedron on the unit sphere."""
    return generate_icosphere_mesh(0, 0, radius=1.0)


@pytest.fixture(scope="session")
def mesh2():
    return generate_icosphere_mesh(2, 5)


@pytest.fixture(scope="session")
def small_refined():
    """Level-3 refined mesh (~1.3k cells) with a width-1 region map."""
    mesh = generate_refined_mesh(3, (1.5 * np.pi, np.pi / 6), np.pi / 8, 4, 20)
    rmap = build_regions(mesh, cap_predicate((1.5 * np.pi, np.pi / 6), 0.3), 1)
    return mesh, rmap


@pytest.fixture(scope="session")
def fixture_lts():
    """The acceptance fixture: refined level-4 mesh and its width-1 region map."""
    return build_fixture()


@pytest.fixture(scope="session")
def tc():
    return TestCaseConfig()


@pytest.fixture(scope="session")
def tc5_small(small_refined, tc):
    mesh, _ = small_refined
    return init_tc5(mesh, tc)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

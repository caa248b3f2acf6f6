import numpy as np
import pytest

from crom.fem import ComponentLibrary
from crom.geometry import build_library_meshes


@pytest.fixture(scope="session")
def meshes4():
    return build_library_meshes(4)


@pytest.fixture(scope="session")
def meshes8():
    return build_library_meshes(8)


@pytest.fixture(scope="session")
def lib4():
    """Coarse library with the default penalty; cheap enough for unit tests."""
    return ComponentLibrary.default(4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from _report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

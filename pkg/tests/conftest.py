"""
Pytest fixtures and configuration for ringslip tests.
"""

import numpy as np
import pytest

from ringslip.assembly import MaterialParams
from ringslip.cases import generate_couette_case, grid_mesh
from ringslip.mesh import Element, ElementShape, Mesh2D


@pytest.fixture
def unit_quad():
    """Single counter-clockwise unit square."""
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return Mesh2D(coords, [Element(ElementShape.QUAD4, (0, 1, 2, 3))])


@pytest.fixture
def unit_tri():
    """Single reference triangle."""
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh2D(coords, [Element(ElementShape.TRI3, (0, 1, 2))])


@pytest.fixture
def quad_grid():
    """3 x 2 quads on [0, 3] x [0, 2] with marked sides."""
    return grid_mesh(
        np.linspace(0, 3, 4), np.linspace(0, 2, 3),
        {"bottom": "bottom", "right": "right", "top": "top", "left": "left"},
    )


@pytest.fixture(scope="session")
def couette_case():
    """Full-size Couette validation case (50 columns)."""
    return generate_couette_case()


@pytest.fixture(scope="session")
def small_couette():
    """Coarse Couette case (10 columns) for quick solver checks."""
    return generate_couette_case(nx=10)


@pytest.fixture
def water():
    """O(1) material parameters."""
    return MaterialParams(rho=1.0, mu=0.1)

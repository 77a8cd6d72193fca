"""
Unstructured 2D meshes, space-time slabs and quadrature.

A slab is the extrusion of a 2D mesh between two time levels; its elements are
prisms (triangles) or hexahedra (quadrilaterals) whose lower and upper faces may
carry different node coordinates.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import MeshStructureError


class ElementShape(str, Enum):
    """Spatial element shapes."""

    TRI3 = "tri3"
    QUAD4 = "quad4"

    @property
    def n_nodes(self) -> int:
        return 3 if self is ElementShape.TRI3 else 4

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        if self is ElementShape.TRI3:
            return ((0, 1), (1, 2), (2, 0))
        return ((0, 1), (1, 2), (2, 3), (3, 0))

    @property
    def reference_area(self) -> float:
        return 0.5 if self is ElementShape.TRI3 else 4.0

    @property
    def vtk_name(self) -> str:
        return "triangle" if self is ElementShape.TRI3 else "quad"


class ElementValidity(str, Enum):
    VALID = "valid"
    COLLAPSING = "collapsing"
    TWISTED = "twisted"


STATIC_BLOCK = -1  # block_id of elements that never move


@dataclass
class Element:
    """A spatial element; node order is counter-clockwise."""

    shape: ElementShape
    nodes: tuple[int, ...]
    block_id: int = STATIC_BLOCK
    is_update_layer: bool = False

    def __post_init__(self):
        self.shape = ElementShape(self.shape)
        self.nodes = tuple(int(n) for n in self.nodes)
        if len(self.nodes) != self.shape.n_nodes:
            raise MeshStructureError(
                f"{self.shape.value} element needs {self.shape.n_nodes} nodes, got {len(self.nodes)}"
            )

    def edge_nodes(self, edge: int) -> tuple[int, int]:
        a, b = self.shape.edges[edge]
        return self.nodes[a], self.nodes[b]


@dataclass(frozen=True)
class BoundaryFace:
    """Edge `edge` of element `element`, tagged with a boundary marker."""

    element: int
    edge: int
    marker: str


@dataclass
class Mesh2D:
    node_coords: np.ndarray
    elements: list[Element]
    boundary_faces: list[BoundaryFace] = field(default_factory=list)

    def __post_init__(self):
        self.node_coords = np.asarray(self.node_coords, dtype=float).reshape(-1, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def referenced_nodes(self) -> np.ndarray:
        """Sorted indices of nodes used by at least one element."""
        if not self.elements:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([e.nodes for e in self.elements]))

    def face_nodes(self, face: BoundaryFace) -> tuple[int, int]:
        return self.elements[face.element].edge_nodes(face.edge)

    def faces_with_marker(self, marker: str) -> list[BoundaryFace]:
        return [f for f in self.boundary_faces if f.marker == marker]

    def markers(self) -> list[str]:
        return sorted({f.marker for f in self.boundary_faces})

    def element_coords(self, index: int, coords: np.ndarray | None = None) -> np.ndarray:
        coords = self.node_coords if coords is None else coords
        return coords[list(self.elements[index].nodes)]

    def element_area(self, index: int, coords: np.ndarray | None = None) -> float:
        return polygon_area(self.element_coords(index, coords))

    def with_elements(self, elements: list[Element]) -> "Mesh2D":
        """Same nodes and faces, new connectivity. Coordinates are shared."""
        mesh = Mesh2D.__new__(Mesh2D)
        mesh.node_coords = self.node_coords
        mesh.elements = elements
        mesh.boundary_faces = list(self.boundary_faces)
        return mesh

    def validate(self, check_areas: bool = True) -> None:
        """
        Check structural consistency.

        Raises:
            MeshStructureError: dangling node index, face referencing a missing
                element or an interior edge, or a non-positive element area.
        """
        n = self.n_nodes
        edge_count: dict[tuple[int, int], int] = {}
        for i, elem in enumerate(self.elements):
            if min(elem.nodes) < 0 or max(elem.nodes) >= n:
                raise MeshStructureError(f"Element {i} references a node outside 0..{n - 1}")
            if check_areas and self.element_area(i) <= 0.0:
                raise MeshStructureError(f"Element {i} has non-positive area")
            for k in range(len(elem.shape.edges)):
                key = tuple(sorted(elem.edge_nodes(k)))
                edge_count[key] = edge_count.get(key, 0) + 1
        for face in self.boundary_faces:
            if not 0 <= face.element < self.n_elements:
                raise MeshStructureError(f"Face {face} references a missing element")
            elem = self.elements[face.element]
            if not 0 <= face.edge < len(elem.shape.edges):
                raise MeshStructureError(f"Face {face} references a missing edge")
            if edge_count[tuple(sorted(elem.edge_nodes(face.edge)))] != 1:
                raise MeshStructureError(f"Face {face} lies on an interior edge")


@dataclass
class SpaceTimeSlab:
    """Node coordinates at both ends of the interval [t_lower, t_upper]."""

    lower_coords: np.ndarray
    upper_coords: np.ndarray
    t_lower: float
    t_upper: float

    @property
    def dt(self) -> float:
        return self.t_upper - self.t_lower


@dataclass(frozen=True)
class QuadratureRule:
    """Points on the reference prism/hexahedron: spatial (xi, eta) and time theta in [-1, 1]."""

    points: np.ndarray
    times: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)


def polygon_area(xy: np.ndarray) -> float:
    """Signed shoelace area, positive for counter-clockwise vertices."""
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def shape_functions(shape: ElementShape, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Linear shape functions and their reference gradients.

    Args:
        shape: Element shape
        points: (m, 2) reference coordinates

    Returns:
        N with shape (m, n_nodes) and dN with shape (m, n_nodes, 2)
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    xi, eta = pts[:, 0], pts[:, 1]
    m = len(pts)
    if shape is ElementShape.TRI3:
        N = np.stack([1.0 - xi - eta, xi, eta], axis=1)
        dN = np.broadcast_to(
            np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (m, 3, 2)
        ).copy()
        return N, dN
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    fx = 1.0 + xi[:, None] * corners[:, 0]
    fy = 1.0 + eta[:, None] * corners[:, 1]
    N = 0.25 * fx * fy
    dN = np.stack([0.25 * corners[:, 0] * fy, 0.25 * corners[:, 1] * fx], axis=2)
    return N, dN


def _gauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=None)
def spatial_quadrature(shape: ElementShape, n_gauss: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """
    Spatial quadrature on the reference element.

    The default is the 3-point interior rule for triangles and 2x2 Gauss for
    quadrilaterals. With n_gauss, an n-point Gauss-Legendre product rule is used
    (collapsed onto the triangle for tri3).
    """
    if n_gauss is None:
        if shape is ElementShape.TRI3:
            pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
            return pts, np.full(3, 1 / 6)
        n_gauss = 2
    g, w = _gauss(n_gauss)
    if shape is ElementShape.QUAD4:
        X, Y = np.meshgrid(g, g, indexing="ij")
        W = np.outer(w, w)
        return np.stack([X.ravel(), Y.ravel()], axis=1), W.ravel()
    # Collapsed coordinates: xi = u, eta = v (1 - u) on the unit square
    u, wu = (1 + g) / 2, w / 2
    U, V = np.meshgrid(u, u, indexing="ij")
    W = np.outer(wu, wu) * (1 - U)
    pts = np.stack([U.ravel(), (V * (1 - U)).ravel()], axis=1)
    return pts, W.ravel()


@lru_cache(maxsize=None)
def spacetime_quadrature(shape: ElementShape, n_gauss: int | None = None) -> QuadratureRule:
    """
    Tensor rule of the spatial rule and Gauss-Legendre in time.

    The default uses 2 points in time. Weights sum to the reference volume
    (1 for the prism, 8 for the hexahedron).
    """
    sp_pts, sp_w = spatial_quadrature(shape, n_gauss)
    tg, tw = _gauss(2 if n_gauss is None else n_gauss)
    points = np.repeat(sp_pts, len(tg), axis=0)
    times = np.tile(tg, len(sp_w))
    weights = np.repeat(sp_w, len(tg)) * np.tile(tw, len(sp_w))
    return QuadratureRule(points=points, times=times, weights=weights)


def time_basis(theta: np.ndarray) -> np.ndarray:
    """Linear-in-time basis [(1 - theta)/2, (1 + theta)/2], shape (m, 2)."""
    theta = np.asarray(theta, dtype=float)
    return np.stack([(1 - theta) / 2, (1 + theta) / 2], axis=-1)


def spacetime_jacobians(
    shape: ElementShape,
    lower: np.ndarray,
    upper: np.ndarray,
    dt: float,
    rule: QuadratureRule | None = None,
) -> np.ndarray:
    """
    Determinants of the space-time Jacobian at the quadrature points.

    Args:
        lower, upper: (E, n_nodes, 2) or (n_nodes, 2) element coordinates

    Returns:
        (E, q) or (q,) array of det J = det J_s(theta) * dt / 2
    """
    rule = rule or spacetime_quadrature(shape)
    single = np.ndim(lower) == 2
    lo = np.asarray(lower, dtype=float)[None] if single else np.asarray(lower, dtype=float)
    up = np.asarray(upper, dtype=float)[None] if single else np.asarray(upper, dtype=float)
    _, dN = shape_functions(shape, rule.points)
    T = time_basis(rule.times)
    X = T[None, :, 0, None, None] * lo[:, None] + T[None, :, 1, None, None] * up[:, None]
    J = np.einsum("qak,eqai->eqik", dN, X)
    det = (J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]) * dt / 2
    return det[0] if single else det


def extrude_slab(mesh: Mesh2D, lower_coords: np.ndarray, upper_coords: np.ndarray,
                 t_n: float, t_np1: float) -> SpaceTimeSlab:
    """
    Build the slab between t_n and t_np1.

    Raises:
        MeshStructureError: coordinate arrays do not match the node count, or t_np1 <= t_n
    """
    lower = np.asarray(lower_coords, dtype=float)
    upper = np.asarray(upper_coords, dtype=float)
    for name, arr in (("lower", lower), ("upper", upper)):
        if arr.shape != (mesh.n_nodes, 2):
            raise MeshStructureError(
                f"{name} coordinates have shape {arr.shape}, expected ({mesh.n_nodes}, 2)"
            )
    if not t_np1 > t_n:
        raise MeshStructureError(f"Slab interval must be increasing, got [{t_n}, {t_np1}]")
    return SpaceTimeSlab(lower.copy(), upper.copy(), float(t_n), float(t_np1))


def slab_volume(slab: SpaceTimeSlab, mesh: Mesh2D, index: int, rule: QuadratureRule | None = None) -> float:
    """Space-time volume of one element."""
    elem = mesh.elements[index]
    rule = rule or spacetime_quadrature(elem.shape)
    nodes = list(elem.nodes)
    det = spacetime_jacobians(elem.shape, slab.lower_coords[nodes], slab.upper_coords[nodes], slab.dt, rule)
    return float(np.dot(rule.weights, det))


def classify_elements(slab: SpaceTimeSlab, mesh: Mesh2D, indices) -> dict[int, ElementValidity]:
    """
    Classify many elements at once.

    Returns:
        Mapping element index -> validity
    """
    indices = np.asarray(list(indices), dtype=int)
    result: dict[int, ElementValidity] = {}
    for shape in ElementShape:
        group = [i for i in indices if mesh.elements[i].shape is shape]
        if not group:
            continue
        conn = np.array([mesh.elements[i].nodes for i in group])
        det = spacetime_jacobians(shape, slab.lower_coords[conn], slab.upper_coords[conn], slab.dt)
        scale = np.abs(det).max(axis=1)
        tol = 1e-12 * scale
        pos = det > tol[:, None]
        neg = det < -tol[:, None]
        for k, i in enumerate(group):
            if scale[k] == 0.0:
                result[int(i)] = ElementValidity.COLLAPSING
            elif neg[k].any():
                # Sign change, or inverted throughout
                result[int(i)] = ElementValidity.TWISTED
            elif not pos[k].all():
                result[int(i)] = ElementValidity.COLLAPSING
            else:
                result[int(i)] = ElementValidity.VALID
    return result


def check_element_validity(slab: SpaceTimeSlab, mesh: Mesh2D, index: int) -> ElementValidity:
    """
    Classify one space-time element as valid, collapsing or twisted.

    The Jacobian is evaluated at the interior quadrature points. A face that
    degenerates at one level only (a wedge) is still valid.
    """
    return classify_elements(slab, mesh, [index])[index]


def min_element_extent(mesh: Mesh2D, direction, coords: np.ndarray | None = None) -> float:
    """
    Smallest projected extent of any element along `direction`.

    Raises:
        MeshStructureError: the mesh has no elements
    """
    if not mesh.elements:
        raise MeshStructureError("Mesh has no elements")
    coords = mesh.node_coords if coords is None else coords
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    proj = coords @ d
    return float(min(np.ptp(proj[list(e.nodes)]) for e in mesh.elements))


def element_diameter(xy: np.ndarray) -> float:
    diff = xy[:, None, :] - xy[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())

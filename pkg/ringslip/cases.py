"""
Case generators: Couette validation channel, packaging machine and custom
meshes read from file.
"""

from typing import Callable

import numpy as np

from .assembly import BCSet, FlowField, MaterialParams, constant_velocity
from .config import CaseConfig, CaseKind
from .errors import ConfigError
from .mesh import BoundaryFace, Element, ElementShape, Mesh2D
from .meshfile import read_mesh
from .solver import Case
from .vring import GAMMA_IN, GAMMA_OUT, ConstantMotion, LayerSpec, StrokeMotion, build_ring

SideMarker = str | Callable[[float, float], str]

PACKAGING_UNIT = 0.005  # m, coarse cell size before refinement
PACKAGING_TARGET = {"space_time_elements": 154_970, "nodes": 158_210}


def grid_mesh(
    xs: np.ndarray,
    ys: np.ndarray,
    markers: dict[str, SideMarker],
    keep: Callable[[int, int], bool] | None = None,
    hole_marker: str | None = None,
    shape: ElementShape = ElementShape.QUAD4,
) -> Mesh2D:
    """
    Tensor-product mesh over xs x ys.

    Args:
        xs, ys: Grid lines
        markers: Marker per side ("bottom", "right", "top", "left"); a callable
            receives the face midpoint and returns the marker
        keep: Cell filter keep(i, j); removed cells become holes
        hole_marker: Marker of faces bordering a hole
        shape: QUAD4 cells, or TRI3 (each cell split along its a-c diagonal)

    Returns:
        Mesh without unreferenced nodes
    """
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()])

    def node(i, j):
        return j * (nx + 1) + i

    def kept(i, j):
        return 0 <= i < nx and 0 <= j < ny and (keep is None or keep(i, j))

    elements: list[Element] = []
    faces: list[tuple[int, int, str]] = []
    sides = (("bottom", 0, -1), ("right", 1, 0), ("top", 0, 1), ("left", -1, 0))
    for j in range(ny):
        for i in range(nx):
            if not kept(i, j):
                continue
            a, b, c, d = node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)
            if shape is ElementShape.QUAD4:
                first = len(elements)
                elements.append(Element(shape, (a, b, c, d)))
                owners = [(first, 0), (first, 1), (first, 2), (first, 3)]
            else:
                first = len(elements)
                elements.append(Element(shape, (a, b, c)))
                elements.append(Element(shape, (a, c, d)))
                owners = [(first, 0), (first, 1), (first + 1, 1), (first + 1, 2)]
            for (side, di, dj), (elem, edge) in zip(sides, owners):
                ni, nj = i + di, j + dj
                if kept(ni, nj):
                    continue
                inside = 0 <= ni < nx and 0 <= nj < ny
                marker = hole_marker if inside else markers.get(side)
                if callable(marker):
                    n0, n1 = elements[elem].edge_nodes(edge)
                    mid = 0.5 * (coords[n0] + coords[n1])
                    marker = marker(mid[0], mid[1])
                if marker:
                    faces.append((elem, edge, marker))

    used = np.unique(np.concatenate([e.nodes for e in elements]))
    renumber = np.full(len(coords), -1)
    renumber[used] = np.arange(len(used))
    elements = [Element(e.shape, tuple(renumber[list(e.nodes)])) for e in elements]
    return Mesh2D(coords[used], elements, [BoundaryFace(e, k, m) for e, k, m in faces])


def merge_meshes(*meshes: Mesh2D) -> Mesh2D:
    """Disjoint union; nodes and elements are renumbered in argument order."""
    coords, elements, faces = [], [], []
    n_off = e_off = 0
    for mesh in meshes:
        coords.append(mesh.node_coords)
        elements.extend(Element(e.shape, tuple(n + n_off for n in e.nodes), e.block_id) for e in mesh.elements)
        faces.extend(BoundaryFace(f.element + e_off, f.edge, f.marker) for f in mesh.boundary_faces)
        n_off += mesh.n_nodes
        e_off += mesh.n_elements
    return Mesh2D(np.vstack(coords), elements, faces)


# ---------------------------------------------------------------------------
# Couette
# ---------------------------------------------------------------------------


def generate_couette_case(
    nx: int = 50,
    dy: float = 0.02,
    u_top: float = 0.02,
    rho: float = 100.0,
    mu: float = 2.5,
    dt: float = 0.2,
    delta: float | None = None,
) -> Case:
    """
    Plane Couette flow in a unit channel with the upper 0.3 m moving as one block.

    Static part [0, 1] x [0, 0.68], update layer [0.68, 0.70], moving block
    [0, 1] x [0.70, 1.0] translating with the top plate. The exact solution
    u = u_top * y / H, p = 0 is prescribed on every boundary and as initial field.
    """
    height = 1.0
    static_top, block_bottom = 0.68, 0.70
    n_static = round(static_top / dy)
    n_block = round((height - block_bottom) / dy)
    if not np.isclose(n_static * dy, static_top) or not np.isclose(n_block * dy, height - block_bottom):
        raise ConfigError(f"dy={dy} does not divide the channel layout")
    xs = np.linspace(0.0, 1.0, nx + 1)
    static = grid_mesh(
        xs, np.linspace(0.0, static_top, n_static + 1),
        {"bottom": "bottom", "right": GAMMA_OUT, "top": "gamma_S", "left": GAMMA_IN},
    )
    block = grid_mesh(
        xs, np.linspace(block_bottom, height, n_block + 1),
        {"bottom": "gamma_M", "right": GAMMA_OUT, "top": "top", "left": GAMMA_IN},
    )
    mesh, ring = build_ring(
        static, block, 1, LayerSpec("gamma_M", "gamma_S"),
        x_in=0.0, x_out=1.0, delta=1.0 / nx if delta is None else delta, structured=True,
    )

    def exact(x, y, t):
        y = np.asarray(y, dtype=float)
        return np.column_stack([u_top * y / height, np.zeros_like(y)])

    u0 = exact(mesh.node_coords[:, 0], mesh.node_coords[:, 1], 0.0)
    bcs = BCSet(
        dirichlet={
            GAMMA_IN: exact,
            GAMMA_OUT: exact,
            "bottom": constant_velocity(0.0, 0.0),
            "top": constant_velocity(u_top, 0.0),
        },
        pressure_pin=(0, 0.0),
    )
    return Case(
        name="couette",
        mesh=mesh,
        ring=ring,
        bcs=bcs,
        params=MaterialParams(rho, mu),
        motion=ConstantMotion(u_top),
        dt=dt,
        initial_flow=FlowField.steady(u0, np.zeros(mesh.n_nodes)),
        exact_velocity=exact,
        velocity_scale=u_top,
        info={"elements": mesh.n_elements, "nodes": len(mesh.referenced_nodes())},
    )


# ---------------------------------------------------------------------------
# Packaging machine
# ---------------------------------------------------------------------------


def nozzle_velocity(x, v_mean: float = 1.0) -> np.ndarray:
    """Parabolic nozzle inflow profile over [0.095, 0.105]; -v_mean at the centre (downward)."""
    x = np.asarray(x, dtype=float)
    return v_mean * 40e3 * (x - 0.095) * (x - 0.105)


def _package_cell(i: int, j: int) -> bool:
    """U-shaped open-top package in coarse cell units of one block (20 x 8 cells)."""
    floor = j == 1 and 4 <= i <= 15
    walls = i in (4, 15) and 2 <= j <= 5
    return floor or walls


def generate_packaging_case(
    scale: float = 0.05,
    u_package: float = 0.1,
    v_nozzle: float = 1.0,
    rho: float = 0.6924,
    mu: float = 271e-7,
    dt: float = 2e-3,
) -> Case:
    """
    Packages moving in a channel under an air nozzle.

    The moving band carries one package per 0.1 m block between two static
    casing strips; each strip connects to the band through its own update layer.
    `scale` refines the coarse 5 mm grid round(11 * scale) times (scale 1 is
    close to the full-size mesh).

    Raises:
        ConfigError: the refinement leaves a package wall thinner than one element
    """
    m = round(11 * scale)
    if m < 1:
        raise ConfigError(f"scale={scale} too small: package spans fewer than 2 elements")
    h = PACKAGING_UNIT / m
    length = 0.2
    xs = np.linspace(0.0, length, 40 * m + 1)
    y_band = 0.01 + h
    y_band_top = y_band + 0.04

    def nozzle_or_casing(x, y):
        return "nozzle" if 0.095 < x < 0.105 else "casing"

    lower = grid_mesh(
        xs, np.linspace(0.0, 0.01, 2 * m + 1),
        {"bottom": "casing", "right": GAMMA_OUT, "top": "gamma_S_low", "left": GAMMA_IN},
        shape=ElementShape.TRI3,
    )
    upper = grid_mesh(
        xs, np.linspace(y_band_top + h, y_band_top + h + 0.01, 2 * m + 1),
        {"bottom": "gamma_S_high", "right": GAMMA_OUT, "top": nozzle_or_casing, "left": GAMMA_IN},
        shape=ElementShape.TRI3,
    )
    block = grid_mesh(
        np.linspace(0.0, 0.1, 20 * m + 1), np.linspace(y_band, y_band_top, 8 * m + 1),
        {"bottom": "gamma_M_low", "right": GAMMA_OUT, "top": "gamma_M_high", "left": GAMMA_IN},
        keep=lambda i, j: not _package_cell(i // m, j // m),
        hole_marker="package",
        shape=ElementShape.TRI3,
    )
    layers = [
        LayerSpec("gamma_M_low", "gamma_S_low", diagonalize=True),
        LayerSpec("gamma_M_high", "gamma_S_high", diagonalize=True),
    ]
    mesh, ring = build_ring(
        merge_meshes(lower, upper), block, 2, layers,
        x_in=0.0, x_out=length, delta=h, structured=False,
    )

    def nozzle(x, y, t):
        return np.column_stack([np.zeros(np.size(x)), nozzle_velocity(x, v_nozzle)])

    bcs = BCSet(
        dirichlet={
            "casing": constant_velocity(0.0, 0.0),
            "nozzle": nozzle,
            "package": constant_velocity(u_package, 0.0),
        }
    )
    physical = mesh.n_elements - ring.block_elements.shape[1]
    info = {
        "refinement": m,
        "cell_size": h,
        "space_time_elements": physical,
        "nodes": len(mesh.referenced_nodes()),
        "target": PACKAGING_TARGET,
    }
    return Case(
        name="packaging",
        mesh=mesh,
        ring=ring,
        bcs=bcs,
        params=MaterialParams(rho, mu),
        motion=ConstantMotion(u_package),
        dt=dt,
        initial_flow=FlowField.zeros(mesh.n_nodes),
        velocity_scale=v_nozzle,
        info=info,
    )


def build_case(config: CaseConfig) -> Case:
    """Instantiate the case described by a CaseConfig."""
    material = {k: v for k, v in (("rho", config.rho), ("mu", config.mu)) if v is not None}
    if config.case is CaseKind.COUETTE:
        case = generate_couette_case(dt=config.resolved_dt, delta=config.delta, **material)
    elif config.case is CaseKind.PACKAGING:
        case = generate_packaging_case(scale=config.scale, dt=config.resolved_dt, **material)
    else:
        case = custom_case(config)
    if config.stroke_times:
        case.motion = StrokeMotion(config.stroke_times, config.stroke_speeds, config.stroke_period)
    elif config.speed is not None:
        case.motion = ConstantMotion(config.speed)
    return case


def custom_case(config: CaseConfig) -> Case:
    """
    Case from a mesh file: zero velocity on `noslip` markers, the ring velocity on
    `moving_walls` markers, traction-free elsewhere, fluid at rest initially.
    """
    if config.mesh is None:
        raise ConfigError("custom case requires 'mesh'")
    if config.rho is None or config.mu is None:
        raise ConfigError("custom case requires 'rho' and 'mu'")
    mesh, ring = read_mesh(config.mesh)
    speed = config.speed if config.speed is not None else 0.0
    dirichlet = {marker: constant_velocity(0.0, 0.0) for marker in config.noslip}
    ux, uy = speed * ring.direction
    dirichlet.update({marker: constant_velocity(ux, uy) for marker in config.moving_walls})
    return Case(
        name=config.mesh.stem,
        mesh=mesh,
        ring=ring,
        bcs=BCSet(dirichlet=dirichlet),
        params=MaterialParams(config.rho, config.mu),
        motion=ConstantMotion(speed),
        dt=config.resolved_dt,
        initial_flow=FlowField.zeros(mesh.n_nodes),
        velocity_scale=max(abs(speed), 1.0),
    )

"""
Virtual-ring shear-slip mesh update.

The moving part of the domain is a chain of identical blocks plus one virtual
copy whose outflow trace is identified with the inflow trace of the first block.
Straight-line motion then becomes circulation around a closed ring: nodes that
pass the critical coordinate are shifted back by the ring length, elements are
switched on and off as they enter and leave the physical region, and the thin
update layers between moving and static parts shear until a slip step reconnects
them one interface pitch upstream.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConstraintViolation, MeshStructureError, TwistedElementError
from .mesh import (
    STATIC_BLOCK,
    BoundaryFace,
    Element,
    ElementShape,
    ElementValidity,
    Mesh2D,
    SpaceTimeSlab,
    classify_elements,
    min_element_extent,
    polygon_area,
)

GAMMA_IN = "gamma_in"
GAMMA_OUT = "gamma_out"


# ---------------------------------------------------------------------------
# Motion programs
# ---------------------------------------------------------------------------


@dataclass
class ConstantMotion:
    """Translation at constant speed along the ring direction."""

    speed: float

    def __call__(self, t: float) -> float:
        return self.speed


@dataclass
class StrokeMotion:
    """
    Piecewise-linear speed program (acceleration, cruise, deceleration).

    Outside [times[0], times[-1]] the end speeds are held. With `period` set the
    program repeats.
    """

    times: Sequence[float]
    speeds: Sequence[float]
    period: float | None = None

    def __post_init__(self):
        if len(self.times) != len(self.speeds) or len(self.times) < 2:
            raise ValueError("StrokeMotion needs matching times/speeds with at least 2 entries")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("StrokeMotion times must be increasing")

    def __call__(self, t: float) -> float:
        if self.period:
            t = self.times[0] + (t - self.times[0]) % self.period
        return float(np.interp(t, self.times, self.speeds))


VelocityFn = Callable[[float], float]


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """Markers locating one update layer between a block and a static portion."""

    moving_marker: str  # block faces forming Gamma_M
    static_marker: str  # static faces forming Gamma_S
    diagonalize: bool = False  # triangles instead of quads for matched interfaces


@dataclass
class UpdateLayer:
    gamma_M: np.ndarray  # ring-ordered moving interface nodes, cyclic
    gamma_S: np.ndarray  # static interface nodes ordered along the motion
    elements: np.ndarray  # indices of the layer elements in the mesh
    update_map: dict[int, int]


@dataclass
class RingTopology:
    n_blocks: int
    nodes_per_block: int
    block_length: float
    direction: np.ndarray
    x_in: float
    x_out: float
    delta: float
    layers: list[UpdateLayer]
    moving_nodes: np.ndarray  # bool mask over all nodes
    block_elements: np.ndarray  # (n_blocks + 1, elements per block)
    structured: bool = True

    @property
    def ring_length(self) -> float:
        return (self.n_blocks + 1) * self.block_length

    @property
    def x_crit(self) -> float:
        return self.x_out + self.delta

    @property
    def tol(self) -> float:
        return 1e-9 * self.block_length

    @property
    def transverse(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    @property
    def gamma_M_nodes(self) -> np.ndarray:
        return np.concatenate([layer.gamma_M for layer in self.layers])

    @property
    def gamma_S_nodes(self) -> np.ndarray:
        return np.concatenate([layer.gamma_S for layer in self.layers])

    @property
    def update_map(self) -> dict[int, int]:
        merged: dict[int, int] = {}
        for layer in self.layers:
            merged.update(layer.update_map)
        return merged

    @property
    def layer_elements(self) -> np.ndarray:
        return np.concatenate([layer.elements for layer in self.layers])

    def project(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) @ self.direction


@dataclass
class ActivityState:
    node_active: np.ndarray
    elem_active: np.ndarray
    elem_active_prev: np.ndarray
    node_shifted: np.ndarray
    elem_skipped: np.ndarray | None = None  # active but excluded from assembly this step

    def __post_init__(self):
        if self.elem_skipped is None:
            self.elem_skipped = np.zeros_like(self.elem_active)

    @property
    def assembled(self) -> np.ndarray:
        return self.elem_active & ~self.elem_skipped

    def assembled_nodes(self, mesh: Mesh2D) -> np.ndarray:
        mask = np.zeros(mesh.n_nodes, dtype=bool)
        for i in np.flatnonzero(self.assembled):
            mask[list(mesh.elements[i].nodes)] = True
        return mask


def _unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    return d / np.linalg.norm(d)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _ordered(nodes, key: np.ndarray) -> np.ndarray:
    nodes = np.unique(np.asarray(list(nodes), dtype=int))
    return nodes[np.argsort(key[nodes], kind="stable")]


def _marker_nodes(mesh: Mesh2D, marker: str) -> set[int]:
    nodes: set[int] = set()
    for face in mesh.faces_with_marker(marker):
        nodes.update(mesh.face_nodes(face))
    return nodes


def close_ring(mesh: Mesh2D, gamma_virt: Sequence[int], gamma_in: Sequence[int]) -> Mesh2D:
    """
    Identify the virtual outflow trace with the first inflow trace.

    Every element reference to gamma_virt[i] is replaced by gamma_in[i]. Nodes
    stay in the array (as orphans), so applying the closure twice changes nothing.

    Raises:
        MeshStructureError: the lists differ in length or the traces do not
            match transversally
    """
    gamma_virt = np.asarray(gamma_virt, dtype=int)
    gamma_in = np.asarray(gamma_in, dtype=int)
    if len(gamma_virt) != len(gamma_in):
        raise MeshStructureError(
            f"Trace lengths differ: {len(gamma_virt)} virtual vs {len(gamma_in)} inflow nodes"
        )
    xy_v = mesh.node_coords[gamma_virt]
    xy_i = mesh.node_coords[gamma_in]
    if len(gamma_in):
        # Traces are parallel copies: node offsets must all agree
        offsets = xy_v - xy_i
        scale = max(np.ptp(mesh.node_coords, axis=0).max(), 1.0)
        if np.abs(offsets - offsets[0]).max() > 1e-9 * scale:
            raise MeshStructureError("Virtual and inflow traces do not match")
    mapping = dict(zip(gamma_virt.tolist(), gamma_in.tolist()))
    elements = [
        replace(e, nodes=tuple(mapping.get(n, n) for n in e.nodes)) for e in mesh.elements
    ]
    return mesh.with_elements(elements)


def build_update_layer(
    coords: np.ndarray,
    gamma_M: Sequence[int],
    gamma_S: Sequence[int],
    direction=(1.0, 0.0),
    offset: float = 0.0,
    diagonalize: bool = False,
) -> tuple[list[Element], dict[int, int]]:
    """
    Fill the gap between the moving and static interfaces with elements.

    Args:
        coords: Node coordinates
        gamma_M: Ring-ordered moving interface nodes (cyclic, uniformly spaced)
        gamma_S: Static interface nodes ordered along the motion
        direction: Motion direction
        offset: Current displacement of Gamma_M relative to its reference position
        diagonalize: Split matched quads into two triangles

    Returns:
        Layer elements and the update map (each Gamma_M node to its upstream neighbour)

    Raises:
        MeshStructureError: interfaces are not monotone, do not cover each other,
            or coincide (zero-width layer)
        ConstraintViolation: fewer Gamma_M than Gamma_S edges, or Gamma_M not uniform
    """
    d = _unit(direction)
    proj = coords @ d
    trans = coords @ np.array([-d[1], d[0]])
    gamma_M = np.asarray(gamma_M, dtype=int)
    gamma_S = np.asarray(gamma_S, dtype=int)
    if len(gamma_S) < 2 or len(gamma_M) < 2:
        raise MeshStructureError("Interfaces need at least two nodes")
    pS = proj[gamma_S]
    span = pS[-1] - pS[0]
    tol = 1e-9 * max(abs(span), 1.0)
    if np.any(np.diff(pS) <= tol) or np.any(np.diff(proj[gamma_M]) <= tol):
        raise MeshStructureError("Interface nodes are not ordered monotonically along the motion")

    pitch = np.diff(proj[gamma_M])
    if np.abs(pitch - pitch[0]).max() > 1e-6 * pitch[0]:
        raise ConstraintViolation("Gamma_M must be uniformly spaced along the motion")

    pM_all = proj[gamma_M] - offset
    inside = (pM_all >= pS[0] - tol) & (pM_all <= pS[-1] + tol)
    M = gamma_M[inside]
    pM = pM_all[inside]
    if len(M) < 2 or abs(pM[0] - pS[0]) > tol or abs(pM[-1] - pS[-1]) > tol:
        raise MeshStructureError("Gamma_M does not cover Gamma_S end to end")
    if len(M) < len(gamma_S):
        raise ConstraintViolation(
            f"Gamma_M has {len(M) - 1} edges but Gamma_S has {len(gamma_S) - 1}; "
            "Gamma_M must have at least as many"
        )
    gap = np.abs(np.median(trans[M]) - np.median(trans[gamma_S]))
    if gap <= tol:
        raise MeshStructureError("Update layer has zero width")

    def oriented(nodes: tuple[int, ...]) -> tuple[int, ...]:
        return nodes if polygon_area(coords[list(nodes)]) > 0 else nodes[::-1]

    elements: list[Element] = []
    matched = len(M) == len(gamma_S) and np.abs(pM - pS).max() <= tol
    if matched:
        for i in range(len(gamma_S) - 1):
            quad = oriented((gamma_S[i], gamma_S[i + 1], M[i + 1], M[i]))
            if diagonalize:
                for tri in ((quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])):
                    elements.append(Element(ElementShape.TRI3, tri, is_update_layer=True))
            else:
                elements.append(Element(ElementShape.QUAD4, quad, is_update_layer=True))
    else:
        # Zipper sweep: always advance along the interface whose next node is closer
        i = j = 0
        while i < len(gamma_S) - 1 or j < len(M) - 1:
            advance_s = j == len(M) - 1 or (i < len(gamma_S) - 1 and pS[i + 1] < pM[j + 1] - tol)
            if advance_s:
                tri = (gamma_S[i], gamma_S[i + 1], M[j])
                i += 1
            else:
                tri = (gamma_S[i], M[j + 1], M[j])
                j += 1
            elements.append(Element(ElementShape.TRI3, oriented(tri), is_update_layer=True))

    update_map = {int(m): int(gamma_M[k - 1]) for k, m in enumerate(gamma_M)}
    return elements, update_map


def build_ring(
    static_mesh: Mesh2D,
    block_mesh: Mesh2D,
    n_blocks: int,
    layer_spec: LayerSpec | Sequence[LayerSpec],
    *,
    direction=(1.0, 0.0),
    x_in: float = 0.0,
    x_out: float | None = None,
    delta: float | None = None,
    in_marker: str = GAMMA_IN,
    out_marker: str = GAMMA_OUT,
    structured: bool = True,
) -> tuple[Mesh2D, RingTopology]:
    """
    Assemble static mesh, n_blocks block copies plus one virtual copy and the
    update layers into a single closed-ring mesh.

    Node indices: static nodes first, then block copies. Element order: static,
    update layers, block copies. Block inflow/outflow traces are located by the
    `in_marker`/`out_marker` faces of `block_mesh`.

    Raises:
        MeshStructureError: inconsistent inputs or non-matching block traces
        ConstraintViolation: delta outside (0, minimal element extent]
    """
    specs = [layer_spec] if isinstance(layer_spec, LayerSpec) else list(layer_spec)
    if n_blocks < 1:
        raise MeshStructureError("n_blocks must be at least 1")
    static_mesh.validate()
    block_mesh.validate()
    d = _unit(direction)
    t_dir = np.array([-d[1], d[0]])

    b_proj = block_mesh.node_coords @ d
    b_trans = block_mesh.node_coords @ t_dir
    block_length = float(np.ptp(b_proj[block_mesh.referenced_nodes()]))
    tol = 1e-9 * block_length
    if x_out is None:
        x_out = x_in + n_blocks * block_length
    if delta is None:
        delta = min_element_extent(block_mesh, d)
    if not 0.0 < delta <= min_element_extent(block_mesh, d) + tol:
        raise ConstraintViolation(
            f"delta={delta} must lie in (0, {min_element_extent(block_mesh, d)}]"
        )

    trace_in = _ordered(_marker_nodes(block_mesh, in_marker), b_trans)
    trace_out = _ordered(_marker_nodes(block_mesh, out_marker), b_trans)
    if len(trace_in) == 0 or len(trace_in) != len(trace_out):
        raise MeshStructureError(
            f"Block traces do not match: {len(trace_in)} inflow vs {len(trace_out)} outflow nodes"
        )
    shift = block_mesh.node_coords[trace_out] - block_mesh.node_coords[trace_in]
    if np.abs(shift - block_length * d).max() > tol:
        raise MeshStructureError("Block outflow trace is not the inflow trace translated by the block length")

    ns = static_mesh.n_nodes
    nb = block_mesh.n_nodes
    coords = [static_mesh.node_coords]
    n_total = ns
    gmaps: list[np.ndarray] = []
    for k in range(n_blocks + 1):
        gmap = np.full(nb, -1, dtype=int)
        if k > 0:
            gmap[trace_in] = gmaps[-1][trace_out]
        fresh = np.flatnonzero(gmap < 0)
        gmap[fresh] = n_total + np.arange(len(fresh))
        n_total += len(fresh)
        coords.append(block_mesh.node_coords[fresh] + k * block_length * d)
        gmaps.append(gmap)
    node_coords = np.vstack(coords)

    layer_markers = {s.moving_marker for s in specs}
    static_layer_markers = {s.static_marker for s in specs}

    elements: list[Element] = [replace(e, block_id=STATIC_BLOCK) for e in static_mesh.elements]
    faces = [f for f in static_mesh.boundary_faces if f.marker not in static_layer_markers]

    # Layers are built on the closed ring, so collect their inputs first
    n_static = len(elements)
    block_elements = []
    block_faces = []
    moving_elements: list[Element] = []
    for k, gmap in enumerate(gmaps):
        first = len(moving_elements)
        block_elements.append(np.arange(first, first + block_mesh.n_elements))
        for e in block_mesh.elements:
            moving_elements.append(Element(e.shape, tuple(gmap[list(e.nodes)]), block_id=k))
        for f in block_mesh.boundary_faces:
            if f.marker in (in_marker, out_marker) or f.marker in layer_markers:
                continue
            block_faces.append((first + f.element, f.edge, f.marker))

    gamma_virt = gmaps[-1][trace_out]
    gamma_in = gmaps[0][trace_in]
    provisional = Mesh2D(node_coords, moving_elements)
    closed = close_ring(provisional, gamma_virt, gamma_in)
    closure = dict(zip(gamma_virt.tolist(), gamma_in.tolist()))

    proj = node_coords @ d
    layers_elems: list[Element] = []
    layer_specs_built = []
    for spec in specs:
        gm_local = _marker_nodes(block_mesh, spec.moving_marker)
        if not gm_local:
            raise MeshStructureError(f"No block faces carry marker '{spec.moving_marker}'")
        gm = {closure.get(int(g[n]), int(g[n])) for g in gmaps for n in gm_local}
        # Inflow copies of virtual nodes sit at x_in on the reference ring
        ring_order = sorted(gm, key=lambda n: proj[n])
        gs_nodes = _marker_nodes(static_mesh, spec.static_marker)
        if not gs_nodes:
            raise MeshStructureError(f"No static faces carry marker '{spec.static_marker}'")
        gs = _ordered(gs_nodes, proj)
        elems, umap = build_update_layer(
            node_coords, ring_order, gs, d, offset=0.0, diagonalize=spec.diagonalize
        )
        start = n_static + len(layers_elems)
        layers_elems.extend(elems)
        layer_specs_built.append(
            UpdateLayer(
                gamma_M=np.asarray(ring_order, dtype=int),
                gamma_S=gs,
                elements=np.arange(start, start + len(elems)),
                update_map=umap,
            )
        )

    offset = n_static + len(layers_elems)
    elements = elements + layers_elems + closed.elements
    faces.extend(BoundaryFace(offset + e, k, m) for e, k, m in block_faces)
    mesh = Mesh2D(node_coords, elements, faces)

    moving = np.zeros(mesh.n_nodes, dtype=bool)
    for e in closed.elements:
        moving[list(e.nodes)] = True
    ring = RingTopology(
        n_blocks=n_blocks,
        nodes_per_block=nb,
        block_length=block_length,
        direction=d,
        x_in=float(x_in),
        x_out=float(x_out),
        delta=float(delta),
        layers=layer_specs_built,
        moving_nodes=moving,
        block_elements=offset + np.vstack(block_elements),
        structured=structured,
    )
    return mesh, ring


# ---------------------------------------------------------------------------
# Motion, update criterion, slip and shift
# ---------------------------------------------------------------------------


def initial_positions(mesh: Mesh2D, ring: RingTopology) -> np.ndarray:
    """Reference coordinates with moving nodes wrapped into (x_crit - L_ring, x_crit]."""
    coords = mesh.node_coords.copy()
    moving = ring.moving_nodes
    proj = ring.project(coords[moving])
    hi = ring.x_crit + ring.tol
    wraps = np.ceil((proj - hi) / ring.ring_length)
    coords[moving] -= np.outer(wraps * ring.ring_length, ring.direction)
    return coords


def advance_motion(slab: SpaceTimeSlab, ring: RingTopology, velocity_fn: VelocityFn) -> SpaceTimeSlab:
    """
    Translate moving nodes over the slab interval.

    The displacement is velocity_fn(t_mid) * dt along the ring direction; static
    and update-layer static nodes keep their lower-level position.
    """
    disp = velocity_fn(0.5 * (slab.t_lower + slab.t_upper)) * slab.dt
    upper = slab.lower_coords.copy()
    upper[ring.moving_nodes] += disp * ring.direction
    return SpaceTimeSlab(slab.lower_coords, upper, slab.t_lower, slab.t_upper)


def bound_gamma_M(mesh: Mesh2D, ring: RingTopology) -> np.ndarray:
    """Moving interface nodes currently referenced by update-layer elements."""
    nodes: set[int] = set()
    for index in ring.layer_elements:
        nodes.update(n for n in mesh.elements[index].nodes if ring.moving_nodes[n])
    return np.array(sorted(nodes), dtype=int)


def needs_connectivity_update(ring: RingTopology, mesh: Mesh2D, upper_coords: np.ndarray) -> bool:
    """True when a bound Gamma_M node has passed x_crit."""
    bound = bound_gamma_M(mesh, ring)
    if len(bound) == 0:
        return False
    return bool((ring.project(upper_coords[bound]) > ring.x_crit + ring.tol).any())


def slip_step(mesh: Mesh2D, ring: RingTopology) -> Mesh2D:
    """
    Reconnect every update-layer element one interface pitch upstream.

    Only connectivity changes; the coordinate array is shared with the input mesh.

    Raises:
        MeshStructureError: a Gamma_M node of a layer element has no update-map entry
    """
    umap = ring.update_map
    elements = list(mesh.elements)
    for index in ring.layer_elements:
        elem = elements[index]
        new_nodes = []
        for n in elem.nodes:
            if ring.moving_nodes[n]:
                if n not in umap:
                    raise MeshStructureError(f"Node {n} of layer element {index} has no update-map entry")
                n = umap[n]
            new_nodes.append(n)
        elements[index] = replace(elem, nodes=tuple(new_nodes))
    return mesh.with_elements(elements)


def shift_nodes(
    ring: RingTopology, upper_coords: np.ndarray, lower_coords: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Translate moving nodes past x_crit back by the ring length.

    The lower-level coordinate of a shifted node is shifted too, so its slab
    displacement is unchanged.

    Returns:
        (upper_coords, lower_coords, node_shifted)
    """
    upper = upper_coords.copy()
    lower = lower_coords.copy()
    shifted = ring.moving_nodes & (ring.project(upper) > ring.x_crit + ring.tol)
    back = ring.ring_length * ring.direction
    upper[shifted] -= back
    lower[shifted] -= back
    return upper, lower, shifted


# ---------------------------------------------------------------------------
# Activity
# ---------------------------------------------------------------------------


def _connectivity(mesh: Mesh2D) -> tuple[dict[ElementShape, np.ndarray], dict[ElementShape, np.ndarray]]:
    groups: dict[ElementShape, list[int]] = {}
    for i, e in enumerate(mesh.elements):
        groups.setdefault(e.shape, []).append(i)
    ids = {s: np.array(g, dtype=int) for s, g in groups.items()}
    conn = {s: np.array([mesh.elements[i].nodes for i in g], dtype=int) for s, g in ids.items()}
    return ids, conn


def seam_elements(mesh: Mesh2D, ring: RingTopology, coords: np.ndarray) -> np.ndarray:
    """Moving elements whose nodes spread over more than half the ring (split by the shift seam)."""
    proj = ring.project(coords)
    torn = np.zeros(mesh.n_elements, dtype=bool)
    ids, conn = _connectivity(mesh)
    for shape in ids:
        spread = np.ptp(proj[conn[shape]], axis=1)
        torn[ids[shape]] = spread > 0.5 * ring.ring_length
    return torn


def update_activity(
    mesh: Mesh2D,
    ring: RingTopology,
    upper_coords: np.ndarray,
    node_shifted: np.ndarray,
    prev: ActivityState | None = None,
) -> ActivityState:
    """
    Recompute node and element activity after motion and shift.

    A moving node is provisionally active when its projection lies in
    (x_in + delta, x_crit]. An element is active when one of its nodes is
    provisionally active, none of its nodes was shifted this step and it does
    not straddle the shift seam. Final node activity is the closure over the
    active elements. Static nodes are always provisionally active.
    """
    proj = ring.project(upper_coords)
    lo = ring.x_in + ring.delta + ring.tol
    hi = ring.x_crit + ring.tol
    provisional = np.where(ring.moving_nodes, (proj > lo) & (proj <= hi), True)
    referenced = np.zeros(mesh.n_nodes, dtype=bool)
    referenced[mesh.referenced_nodes()] = True
    provisional &= referenced

    elem_active = np.zeros(mesh.n_elements, dtype=bool)
    ids, conn = _connectivity(mesh)
    for shape in ids:
        c = conn[shape]
        elem_active[ids[shape]] = provisional[c].any(axis=1) & ~node_shifted[c].any(axis=1)
    elem_active &= ~seam_elements(mesh, ring, upper_coords)

    node_active = np.zeros(mesh.n_nodes, dtype=bool)
    for shape in ids:
        node_active[conn[shape][elem_active[ids[shape]]].ravel()] = True

    if prev is None:
        elem_prev = elem_active.copy()
    else:
        elem_prev = prev.elem_active & ~prev.elem_skipped
    return ActivityState(
        node_active=node_active,
        elem_active=elem_active,
        elem_active_prev=elem_prev,
        node_shifted=np.asarray(node_shifted, dtype=bool).copy(),
    )


def active_copy_counts(ring: RingTopology, activity: ActivityState) -> np.ndarray:
    """Number of active copies of each block element (n_blocks when the one-copy rule holds)."""
    return activity.elem_active[ring.block_elements].sum(axis=0)


# ---------------------------------------------------------------------------
# Lateral boundaries and conformity
# ---------------------------------------------------------------------------


def update_lateral_boundaries(
    mesh: Mesh2D, ring: RingTopology, activity: ActivityState, coords: np.ndarray
) -> list[BoundaryFace]:
    """
    Faces on the current inflow/outflow boundary of the assembled region.

    These are edges of assembled elements that have no assembled neighbour and
    carry no fixed marker. Faces upstream of the domain centre are tagged
    gamma_in, the rest gamma_out.

    Raises:
        MeshStructureError: no moving element is active (the domain vanished)
    """
    assembled = activity.assembled
    moving_active = assembled[ring.block_elements.ravel()].any()
    if not moving_active:
        raise MeshStructureError("Domain vanished: no active moving elements")

    fixed = {tuple(sorted(mesh.face_nodes(f))) for f in mesh.boundary_faces}
    owners: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i in np.flatnonzero(assembled):
        elem = mesh.elements[i]
        for k in range(len(elem.shape.edges)):
            owners.setdefault(tuple(sorted(elem.edge_nodes(k))), []).append((int(i), k))

    centre = 0.5 * (ring.x_in + ring.x_out)
    faces = []
    for key, refs in owners.items():
        if len(refs) != 1 or key in fixed:
            continue
        element, edge = refs[0]
        mid = 0.5 * (ring.project(coords[key[0]]) + ring.project(coords[key[1]]))
        faces.append(BoundaryFace(element, edge, GAMMA_IN if mid < centre else GAMMA_OUT))
    faces.sort(key=lambda f: (f.element, f.edge))
    return faces


def conform_structured_boundary(
    mesh: Mesh2D, ring: RingTopology, upper_coords: np.ndarray, lateral_faces: Sequence[BoundaryFace]
) -> np.ndarray:
    """
    Snap moving nodes of lateral faces onto x_in / x_out.

    Only structured rings are snapped; for unstructured meshes the coordinates
    are returned unchanged.
    """
    coords = upper_coords.copy()
    if not ring.structured:
        return coords
    for face in lateral_faces:
        target = ring.x_in if face.marker == GAMMA_IN else ring.x_out
        for n in mesh.face_nodes(face):
            if ring.moving_nodes[n]:
                coords[n] += (target - coords[n] @ ring.direction) * ring.direction
    return coords


@dataclass
class SlabGeometry:
    slab: SpaceTimeSlab
    activity: ActivityState
    lateral_faces: list[BoundaryFace]
    incidents: list[str] = field(default_factory=list)


def resolve_slab_geometry(
    mesh: Mesh2D,
    ring: RingTopology,
    lower_coords: np.ndarray,
    upper_coords: np.ndarray,
    t_n: float,
    t_np1: float,
    activity: ActivityState,
    step: int | None = None,
    max_rounds: int = 4,
) -> SlabGeometry:
    """
    Lateral faces, conformity snap and validity screening for one slab.

    Collapsing elements are marked skipped and the faces are recomputed until the
    assembled set is stable; snapping accumulates over the rounds.

    Raises:
        TwistedElementError: an assembled element changes orientation
    """
    skipped = np.zeros(mesh.n_elements, dtype=bool)
    incidents: list[str] = []
    snapped = upper_coords
    # Static elements never deform
    candidates = np.array(
        [i for i in np.flatnonzero(activity.elem_active)
         if mesh.elements[i].block_id != STATIC_BLOCK or mesh.elements[i].is_update_layer],
        dtype=int,
    )
    for _ in range(max_rounds):
        state = replace(activity, elem_skipped=skipped.copy())
        faces = update_lateral_boundaries(mesh, ring, state, upper_coords)
        snapped = conform_structured_boundary(mesh, ring, snapped, faces)
        slab = SpaceTimeSlab(lower_coords, snapped, t_n, t_np1)
        verdict = classify_elements(slab, mesh, candidates[~skipped[candidates]])
        newly = []
        for i, v in verdict.items():
            if v is ElementValidity.TWISTED:
                raise TwistedElementError(i, step)
            if v is ElementValidity.COLLAPSING:
                newly.append(i)
        if not newly:
            return SlabGeometry(slab, state, faces, incidents)
        skipped[newly] = True
        incidents.extend(f"element {i} collapsing, skipped" for i in newly)
    state = replace(activity, elem_skipped=skipped)
    faces = update_lateral_boundaries(mesh, ring, state, upper_coords)
    return SlabGeometry(SpaceTimeSlab(lower_coords, snapped, t_n, t_np1), state, faces, incidents)

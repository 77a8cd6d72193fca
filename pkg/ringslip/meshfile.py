"""
Line-oriented text format for a ring mesh.

    # comment
    $Nodes
    <count>
    id x y
    $Elements
    <count>
    id shape block_id layer_flag node...
    $Faces
    <count>
    element edge marker
    $Ring
    1
    n_blocks block_length dir_x dir_y delta x_in x_out structured nodes_per_block
    $Layers
    <count>
    layer M|S|E index...
    $UpdateMap
    <count>
    layer node replacement

Every section header is followed by the number of records it holds.
"""

from pathlib import Path

import numpy as np

from .errors import MeshFileError, MeshStructureError
from .mesh import STATIC_BLOCK, BoundaryFace, Element, ElementShape, Mesh2D, min_element_extent
from .vring import RingTopology, UpdateLayer

SECTIONS = ("$Nodes", "$Elements", "$Faces", "$Ring", "$Layers", "$UpdateMap")


def write_mesh(path: Path, mesh: Mesh2D, ring: RingTopology) -> None:
    """Write mesh and ring topology; floats use repr so a round trip is exact."""
    lines = ["# ringslip mesh", "$Nodes", str(mesh.n_nodes)]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.node_coords.tolist())]
    lines += ["$Elements", str(mesh.n_elements)]
    for i, e in enumerate(mesh.elements):
        nodes = " ".join(map(str, e.nodes))
        lines.append(f"{i} {e.shape.value} {e.block_id} {int(e.is_update_layer)} {nodes}")
    lines += ["$Faces", str(len(mesh.boundary_faces))]
    lines += [f"{f.element} {f.edge} {f.marker}" for f in mesh.boundary_faces]
    dx, dy = ring.direction.tolist()
    lines += [
        "$Ring",
        "1",
        f"{ring.n_blocks} {ring.block_length!r} {dx!r} {dy!r} {ring.delta!r} "
        f"{ring.x_in!r} {ring.x_out!r} {int(ring.structured)} {ring.nodes_per_block}",
    ]
    layer_lines = []
    for k, layer in enumerate(ring.layers):
        for tag, values in (("M", layer.gamma_M), ("S", layer.gamma_S), ("E", layer.elements)):
            layer_lines.append(f"{k} {tag} " + " ".join(map(str, np.asarray(values).tolist())))
    lines += ["$Layers", str(len(layer_lines)), *layer_lines]
    map_lines = [f"{k} {a} {b}" for k, layer in enumerate(ring.layers) for a, b in layer.update_map.items()]
    lines += ["$UpdateMap", str(len(map_lines)), *map_lines]
    Path(path).write_text("\n".join(lines) + "\n")


def _split_sections(text: str) -> dict[str, list[tuple[int, list[str]]]]:
    sections: dict[str, list[tuple[int, list[str]]]] = {}
    headers: dict[str, tuple[int, int]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("$"):
            if line not in SECTIONS:
                raise MeshFileError(f"unknown section '{line}'", lineno)
            if line in sections:
                raise MeshFileError(f"duplicate section '{line}'", lineno)
            current = line
            sections[current] = []
            headers[current] = (lineno, -1)
            continue
        if current is None:
            raise MeshFileError("data before the first section", lineno)
        start, count = headers[current]
        if count < 0:
            try:
                count = int(line)
            except ValueError:
                raise MeshFileError(f"expected record count after {current}", lineno) from None
            headers[current] = (start, count)
            continue
        sections[current].append((lineno, line.split()))
    for name, (start, count) in headers.items():
        if count < 0:
            raise MeshFileError(f"{name} has no record count", start)
        if len(sections[name]) != count:
            raise MeshFileError(f"{name} declares {count} records, found {len(sections[name])}", start)
    for name in SECTIONS:
        if name not in sections:
            raise MeshFileError(f"missing section {name}")
    return sections


def read_mesh(path: Path) -> tuple[Mesh2D, RingTopology]:
    """
    Read a mesh file written by write_mesh.

    Raises:
        MeshFileError: unknown section, count mismatch, dangling index or a
            shift offset larger than the minimal moving element extent
    """
    sections = _split_sections(Path(path).read_text())

    def number(token: str, lineno: int, kind=float):
        try:
            return kind(token)
        except ValueError:
            raise MeshFileError(f"bad value '{token}'", lineno) from None

    coords = []
    for k, (lineno, tok) in enumerate(sections["$Nodes"]):
        if len(tok) != 3 or number(tok[0], lineno, int) != k:
            raise MeshFileError(f"expected node record '{k} x y'", lineno)
        coords.append((number(tok[1], lineno), number(tok[2], lineno)))
    n_nodes = len(coords)

    elements = []
    for k, (lineno, tok) in enumerate(sections["$Elements"]):
        if len(tok) < 4 or number(tok[0], lineno, int) != k:
            raise MeshFileError(f"expected element record starting with id {k}", lineno)
        try:
            shape = ElementShape(tok[1])
        except ValueError:
            raise MeshFileError(f"unknown element shape '{tok[1]}'", lineno) from None
        nodes = [number(t, lineno, int) for t in tok[4:]]
        if len(nodes) != shape.n_nodes:
            raise MeshFileError(f"{shape.value} needs {shape.n_nodes} nodes", lineno)
        bad = [n for n in nodes if not 0 <= n < n_nodes]
        if bad:
            raise MeshFileError(f"element {k} references missing node {bad[0]}", lineno)
        elements.append(Element(shape, tuple(nodes), number(tok[2], lineno, int), tok[3] == "1"))

    faces = []
    for lineno, tok in sections["$Faces"]:
        if len(tok) != 3:
            raise MeshFileError("expected face record 'element edge marker'", lineno)
        elem, edge = number(tok[0], lineno, int), number(tok[1], lineno, int)
        if not 0 <= elem < len(elements):
            raise MeshFileError(f"face references missing element {elem}", lineno)
        if not 0 <= edge < elements[elem].shape.n_nodes:
            raise MeshFileError(f"face references missing edge {edge}", lineno)
        faces.append(BoundaryFace(elem, edge, tok[2]))
    mesh = Mesh2D(np.array(coords, dtype=float).reshape(-1, 2), elements, faces)

    if len(sections["$Ring"]) != 1:
        raise MeshFileError("$Ring must hold exactly one record")
    ring_line, tok = sections["$Ring"][0]
    if len(tok) != 9:
        raise MeshFileError("expected ring record with 9 fields", ring_line)
    n_blocks = number(tok[0], ring_line, int)
    block_length, dx, dy, delta, x_in, x_out = (number(t, ring_line) for t in tok[1:7])
    structured = tok[7] == "1"
    nodes_per_block = number(tok[8], ring_line, int)

    layer_data: dict[int, dict[str, np.ndarray]] = {}
    for lineno, tok in sections["$Layers"]:
        if len(tok) < 2 or tok[1] not in ("M", "S", "E"):
            raise MeshFileError("expected layer record 'layer M|S|E index...'", lineno)
        values = np.array([number(t, lineno, int) for t in tok[2:]], dtype=int)
        limit = len(elements) if tok[1] == "E" else n_nodes
        if len(values) and (values.min() < 0 or values.max() >= limit):
            raise MeshFileError("layer record has a dangling index", lineno)
        layer_data.setdefault(number(tok[0], lineno, int), {})[tok[1]] = values
    maps: dict[int, dict[int, int]] = {k: {} for k in layer_data}
    for lineno, tok in sections["$UpdateMap"]:
        if len(tok) != 3:
            raise MeshFileError("expected update-map record 'layer node replacement'", lineno)
        k, a, b = (number(t, lineno, int) for t in tok)
        if k not in maps or not (0 <= a < n_nodes and 0 <= b < n_nodes):
            raise MeshFileError("update-map record has a dangling index", lineno)
        maps[k][a] = b

    layers = []
    for k in sorted(layer_data):
        data = layer_data[k]
        if set(data) != {"M", "S", "E"}:
            raise MeshFileError(f"layer {k} is missing M, S or E records")
        layers.append(UpdateLayer(data["M"], data["S"], data["E"], maps[k]))

    moving = np.zeros(n_nodes, dtype=bool)
    per_block: dict[int, list[int]] = {}
    for i, e in enumerate(elements):
        if e.block_id != STATIC_BLOCK:
            moving[list(e.nodes)] = True
            per_block.setdefault(e.block_id, []).append(i)
    if sorted(per_block) != list(range(n_blocks + 1)):
        raise MeshFileError(f"expected elements for blocks 0..{n_blocks}", ring_line)
    sizes = {len(v) for v in per_block.values()}
    if len(sizes) != 1:
        raise MeshFileError("block copies differ in element count", ring_line)

    first_block = mesh.with_elements([elements[i] for i in per_block[0]])
    try:
        bound = min_element_extent(first_block, (dx, dy))
    except MeshStructureError as e:
        raise MeshFileError(str(e), ring_line) from e
    if not 0 < delta <= bound * (1 + 1e-9):
        raise MeshFileError(f"delta={delta} exceeds the minimal moving element extent {bound}", ring_line)

    ring = RingTopology(
        n_blocks=n_blocks,
        nodes_per_block=nodes_per_block,
        block_length=block_length,
        direction=np.array([dx, dy]) / np.hypot(dx, dy),
        x_in=x_in,
        x_out=x_out,
        delta=delta,
        layers=layers,
        moving_nodes=moving,
        block_elements=np.array([per_block[k] for k in range(n_blocks + 1)], dtype=int),
        structured=structured,
    )
    return mesh, ring

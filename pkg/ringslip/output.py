"""
Snapshot and error-history writers.
"""

import csv
from pathlib import Path

import meshio
import numpy as np

from .mesh import ElementShape
from .solver import StepReport, StepState

CSV_COLUMNS = ["step", "time", "max_rel_error", "did_update", "newton_iters"]


def write_vtk_snapshot(state: StepState, path: Path) -> int:
    """
    Write the assembled elements at the upper slab level as a legacy ASCII VTK grid.

    Point data: velocity (3 components, z = 0) and pressure. Cell data: block_id
    and was_updated (update-layer elements reconnected during this step).

    Returns:
        Number of cells written
    """
    mesh = state.mesh
    assembled = np.flatnonzero(state.activity.assembled)
    used = np.unique(np.concatenate([mesh.elements[i].nodes for i in assembled])) if len(assembled) else []
    renumber = np.full(mesh.n_nodes, -1)
    renumber[used] = np.arange(len(used))

    points = np.zeros((len(used), 3))
    points[:, :2] = state.slab.upper_coords[used]
    velocity = np.zeros((len(used), 3))
    velocity[:, :2] = state.flow.u_upper[used]

    cells, block_ids, updated = [], [], []
    for shape in ElementShape:
        ids = [i for i in assembled if mesh.elements[i].shape is shape]
        if not ids:
            continue
        cells.append((shape.vtk_name, renumber[np.array([mesh.elements[i].nodes for i in ids])]))
        block_ids.append(np.array([mesh.elements[i].block_id for i in ids], dtype=int))
        flag = state.report.did_connectivity_update
        updated.append(np.array([int(flag and mesh.elements[i].is_update_layer) for i in ids], dtype=int))

    out = meshio.Mesh(
        points,
        cells,
        point_data={"velocity": velocity, "pressure": state.flow.p_upper[used]},
        cell_data={"block_id": block_ids, "was_updated": updated},
    )
    meshio.write(path, out, file_format="vtk", binary=False)
    return len(assembled)


def write_error_csv(reports: list[StepReport], path: Path) -> None:
    """One row per step; max_rel_error is blank when no exact solution is known."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            err = "" if r.max_rel_error is None else f"{r.max_rel_error:.6e}"
            writer.writerow([r.step, f"{r.time:.10g}", err, int(r.did_connectivity_update), r.newton_iters])


class SnapshotWriter:
    """Sink for run_time_loop writing every `every`-th step to out_dir."""

    def __init__(self, out_dir: Path, every: int = 1):
        self.out_dir = Path(out_dir)
        self.every = every
        self.written: list[Path] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def __call__(self, state: StepState) -> None:
        if self.every <= 0 or state.step % self.every:
            return
        path = self.out_dir / f"snapshot_{state.step:05d}.vtk"
        write_vtk_snapshot(state, path)
        self.written.append(path)


def write_final_state(state: StepState, path: Path) -> None:
    """Dump the last slab's coordinates and fields as a compressed numpy archive."""
    np.savez_compressed(
        path,
        step=state.step,
        coords=state.slab.upper_coords,
        velocity=state.flow.u_upper,
        pressure=state.flow.p_upper,
        node_active=state.activity.node_active,
        elem_active=state.activity.elem_active,
    )

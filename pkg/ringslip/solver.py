"""
Newton iterations per slab, sparse linear solves and the time-stepping loop.
"""

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from rich.console import Console
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .assembly import BCSet, FlowField, MaterialParams, assemble_slab_system
from .errors import ConstraintViolation, ConvergenceError, RingslipError, SingularSystemError
from .mesh import BoundaryFace, Mesh2D, SpaceTimeSlab, polygon_area
from .vring import (
    ActivityState,
    RingTopology,
    VelocityFn,
    active_copy_counts,
    advance_motion,
    initial_positions,
    needs_connectivity_update,
    resolve_slab_geometry,
    shift_nodes,
    slip_step,
    update_activity,
)

console = Console()

TRANSVERSE_WEIGHT = 1e3  # anisotropic distance for seeding fresh nodes
DENSE_PIVOT_LIMIT = 4000  # largest system searched for a numerical zero pivot


@dataclass
class SolverConfig:
    """Nonlinear and linear solver settings."""

    newton_tol: float = 1e-10  # relative residual
    newton_atol: float = 1e-14  # absolute residual
    newton_step_tol: float = 1e-12  # max-norm update relative to max(1, |U|)
    newton_max_iters: int = 12
    linear_solver: Literal["direct", "iterative"] = "direct"
    linear_tol: float = 1e-12  # GMRES relative tolerance
    deterministic_assembly: bool = True  # shape groups summed in fixed order, not as they finish
    check_invariants: bool = False
    verbose: bool = False


@dataclass
class StepReport:
    step: int
    time: float
    did_connectivity_update: bool = False
    n_active_nodes: int = 0
    n_active_elems: int = 0
    n_active_dofs: int = 0
    newton_iters: int = 0
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False
    incidents: list[str] = field(default_factory=list)
    max_rel_error: float | None = None


@dataclass
class Case:
    """Everything needed to run one simulation."""

    name: str
    mesh: Mesh2D
    ring: RingTopology
    bcs: BCSet
    params: MaterialParams
    motion: VelocityFn
    dt: float
    initial_flow: FlowField
    exact_velocity: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | None = None
    velocity_scale: float = 1.0  # normalizes reported errors
    info: dict = field(default_factory=dict)


@dataclass
class StepState:
    """Geometry and fields after one step; handed to output sinks."""

    step: int
    mesh: Mesh2D
    slab: SpaceTimeSlab
    activity: ActivityState
    flow: FlowField
    report: StepReport
    lateral_faces: list[BoundaryFace]


@dataclass
class RunResult:
    reports: list[StepReport] = field(default_factory=list)
    update_steps: list[int] = field(default_factory=list)
    incidents: list[str] = field(default_factory=list)
    final: StepState | None = None

    @property
    def max_rel_errors(self) -> list[float | None]:
        return [r.max_rel_error for r in self.reports]


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def zero_pivot_dof(matrix: sp.spmatrix) -> int | None:
    """
    First DOF that cannot receive a nonzero pivot.

    Structural deficiency is found by bipartite matching of rows to columns;
    otherwise small systems are factorized densely with partial pivoting and the
    first vanishing diagonal entry of U is reported.
    """
    A = sp.csr_matrix(matrix, copy=True)
    A.eliminate_zeros()
    match = maximum_bipartite_matching(A, perm_type="row")
    unmatched = np.flatnonzero(match < 0)
    if len(unmatched):
        return int(unmatched[0])
    if A.shape[0] > DENSE_PIVOT_LIMIT:
        return None
    _, _, upper = sla.lu(A.toarray())
    diag = np.abs(np.diag(upper))
    small = np.flatnonzero(diag <= A.shape[0] * np.finfo(float).eps * max(diag.max(), 1e-300))
    return int(small[0]) if len(small) else None


def linear_solve(matrix: sp.spmatrix, rhs: np.ndarray, config: SolverConfig | None = None) -> np.ndarray:
    """
    Solve matrix @ x = rhs.

    Raises:
        SingularSystemError: a zero row is present or the factorization fails
        ConvergenceError: GMRES did not reach the tolerance
    """
    config = config or SolverConfig()
    A = sp.csr_matrix(matrix)
    row_nnz = np.diff(A.indptr)
    row_abs = np.abs(A).sum(axis=1).A1
    empty = np.flatnonzero((row_nnz == 0) | (row_abs == 0.0))
    if len(empty):
        raise SingularSystemError(int(empty[0]), "empty row")
    A = A.tocsc()
    if config.linear_solver == "direct":
        try:
            lu = spla.splu(A)
        except RuntimeError as e:
            raise SingularSystemError(zero_pivot_dof(A), str(e)) from e
        x = lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SingularSystemError(None, "non-finite solution")
        return x
    try:
        ilu = spla.spilu(A, drop_tol=1e-8, fill_factor=30)
    except RuntimeError as e:
        raise SingularSystemError(zero_pivot_dof(A), str(e)) from e
    M = spla.LinearOperator(A.shape, ilu.solve)
    x, info = spla.gmres(A, rhs, M=M, rtol=config.linear_tol, atol=0.0, restart=100, maxiter=50)
    if info != 0:
        raise ConvergenceError(f"GMRES did not converge (info={info})")
    return x


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------


def solve_slab(
    slab: SpaceTimeSlab,
    mesh: Mesh2D,
    activity: ActivityState,
    flow: FlowField,
    params: MaterialParams,
    bcs: BCSet,
    lateral_faces: list[BoundaryFace],
    config: SolverConfig | None = None,
    step: int = 0,
) -> tuple[FlowField, StepReport]:
    """
    Newton iterations for one slab, starting from `flow` as the initial guess.

    At least one update is always performed. Converged when the residual drops
    by newton_tol relative to the first one, falls below newton_atol, or the
    update becomes negligible.

    Raises:
        ConvergenceError: the residual grew over three consecutive iterations, or
            newton_max_iters updates did not reach convergence
    """
    config = config or SolverConfig()
    report = StepReport(step=step, time=slab.t_upper)
    U = flow.unknowns()
    deterministic = config.deterministic_assembly
    system = assemble_slab_system(slab, mesh, activity, flow, params, bcs, lateral_faces,
                                  deterministic=deterministic)
    report.incidents.extend(f"element {i} collapsing, skipped" for i in system.skipped)
    for marker in system.dirichlet.empty_markers:
        report.incidents.append(f"Dirichlet marker '{marker}' has no faces")
    r0 = float(np.linalg.norm(system.residual))
    history = [r0]
    current = flow
    for it in range(1, config.newton_max_iters + 1):
        dU = linear_solve(system.matrix, -system.residual, config)
        U = U + dU
        current = flow.with_unknowns(U)
        system = assemble_slab_system(slab, mesh, activity, current, params, bcs, lateral_faces,
                                      deterministic=deterministic)
        r = float(np.linalg.norm(system.residual))
        history.append(r)
        report.newton_iters = it
        if config.verbose:
            console.print(f"[dim]  step {step} newton {it}: |R| = {r:.3e}[/dim]")
        step_small = np.abs(dU).max() <= config.newton_step_tol * max(1.0, np.abs(U).max())
        if r <= config.newton_tol * r0 or r <= config.newton_atol or step_small:
            report.converged = True
            break
        if len(history) >= 4 and history[-1] > history[-2] > history[-3] > history[-4]:
            report.residual_history = history
            raise ConvergenceError(f"Newton diverged at step {step}", report)

    report.residual_history = history
    if not report.converged:
        raise ConvergenceError(
            f"Newton did not converge in {config.newton_max_iters} iterations at step {step} "
            f"(|R| = {history[-1]:.3e}, initial {r0:.3e})",
            report,
        )
    report.n_active_elems = int(system.assembled.sum())
    report.n_active_nodes = int(activity.assembled_nodes(mesh).sum())
    report.n_active_dofs = system.n_free_dofs
    return current, report


# ---------------------------------------------------------------------------
# Time loop
# ---------------------------------------------------------------------------


def seed_fresh_nodes(
    flow: FlowField,
    coords: np.ndarray,
    ring: RingTopology,
    was_assembled: np.ndarray,
    now_assembled: np.ndarray,
) -> FlowField:
    """
    Initial guess for the next slab: previous upper values at both levels.

    Nodes that just joined the assembled region copy the state of the nearest
    node that was already assembled, measured with a strong transverse weight so
    the donor sits on the same streamline.
    """
    u = flow.u_upper.copy()
    p = flow.p_upper.copy()
    fresh = np.flatnonzero(now_assembled & ~was_assembled)
    donors = np.flatnonzero(now_assembled & was_assembled)
    if len(fresh) and len(donors):
        scaled = np.column_stack([ring.project(coords), TRANSVERSE_WEIGHT * (coords @ ring.transverse)])
        _, nearest = cKDTree(scaled[donors]).query(scaled[fresh])
        u[fresh] = u[donors[nearest]]
        p[fresh] = p[donors[nearest]]
    return FlowField(u.copy(), u.copy(), p.copy(), p.copy(), u.copy())


def active_area(mesh: Mesh2D, coords: np.ndarray, assembled: np.ndarray) -> float:
    return sum(polygon_area(coords[list(mesh.elements[i].nodes)]) for i in np.flatnonzero(assembled))


def check_step_invariants(mesh: Mesh2D, ring: RingTopology, activity: ActivityState,
                          coords: np.ndarray, expected_area: float | None) -> None:
    """
    Raises:
        ConstraintViolation: one-copy rule, activity closure or area conservation broken
    """
    counts = active_copy_counts(ring, activity)
    if np.any(counts != ring.n_blocks):
        bad = int(np.flatnonzero(counts != ring.n_blocks)[0])
        raise ConstraintViolation(f"Block element {bad} has {counts[bad]} active copies, expected {ring.n_blocks}")
    closure = np.zeros(mesh.n_nodes, dtype=bool)
    for i in np.flatnonzero(activity.elem_active):
        closure[list(mesh.elements[i].nodes)] = True
    if np.any(closure != activity.node_active):
        raise ConstraintViolation("Active nodes are not the closure of active elements")
    if expected_area is not None:
        area = active_area(mesh, coords, activity.assembled)
        if abs(area - expected_area) > 1e-9 * expected_area:
            raise ConstraintViolation(f"Active area {area:.12g} differs from domain area {expected_area:.12g}")


def relative_error(case: Case, coords: np.ndarray, flow: FlowField, nodes: np.ndarray, t: float) -> float | None:
    """Max x-velocity deviation from the exact solution, scaled by the case velocity."""
    if case.exact_velocity is None:
        return None
    exact = np.asarray(case.exact_velocity(coords[nodes, 0], coords[nodes, 1], t)).reshape(-1, 2)
    return float(np.abs(flow.u_upper[nodes, 0] - exact[:, 0]).max() / case.velocity_scale)


def run_time_loop(
    case: Case,
    n_steps: int,
    config: SolverConfig | None = None,
    sink: Callable[[StepState], None] | None = None,
    result: RunResult | None = None,
) -> RunResult:
    """
    Advance the case over n_steps slabs.

    Each step moves the ring, applies a slip step when a bound interface node
    passes x_crit, shifts nodes past x_crit, recomputes activity and lateral
    boundaries, snaps structured boundaries, screens element validity and solves
    the slab. `sink` is called with the initial state (step 0) and after every step.
    Reports are appended to `result` as they complete, so a caller passing its
    own RunResult keeps the history of a run that fails part way.

    Raises:
        TwistedElementError: a space-time element is twisted
        ConvergenceError: Newton diverged or did not converge
    """
    config = config or SolverConfig()
    mesh, ring = case.mesh, case.ring
    result = result if result is not None else RunResult()

    positions = initial_positions(mesh, ring)
    activity = update_activity(mesh, ring, positions, np.zeros(mesh.n_nodes, dtype=bool))
    geometry = resolve_slab_geometry(mesh, ring, positions, positions, -case.dt, 0.0, activity, step=0)
    activity = geometry.activity
    snapped = geometry.slab.upper_coords
    flow = case.initial_flow
    expected_area = (
        active_area(mesh, snapped, activity.assembled) if (config.check_invariants and ring.structured) else None
    )
    report0 = StepReport(step=0, time=0.0, converged=True)
    report0.max_rel_error = relative_error(case, snapped, flow, np.flatnonzero(activity.assembled_nodes(mesh)), 0.0)
    if sink:
        sink(StepState(0, mesh, geometry.slab, activity, flow, report0, geometry.lateral_faces))

    for step in range(1, n_steps + 1):
        t_n = (step - 1) * case.dt
        t_np1 = step * case.dt
        moved = advance_motion(SpaceTimeSlab(positions, positions, t_n, t_np1), ring, case.motion)
        upper = moved.upper_coords

        was_assembled = activity.assembled_nodes(mesh)
        did_update = needs_connectivity_update(ring, mesh, upper)
        if did_update:
            before = mesh.node_coords
            mesh = slip_step(mesh, ring)
            if mesh.node_coords is not before:
                raise RingslipError("Slip step must not touch node coordinates")
            result.update_steps.append(step)

        upper, lower, shifted = shift_nodes(ring, upper, snapped)
        activity = update_activity(mesh, ring, upper, shifted, prev=activity)
        geometry = resolve_slab_geometry(mesh, ring, lower, upper, t_n, t_np1, activity, step=step)
        activity = geometry.activity
        if config.check_invariants:
            check_step_invariants(mesh, ring, activity, geometry.slab.upper_coords, expected_area)

        now_assembled = activity.assembled_nodes(mesh)
        guess = seed_fresh_nodes(flow, geometry.slab.upper_coords, ring, was_assembled, now_assembled)
        guess.u_minus = flow.u_upper.copy()
        flow, report = solve_slab(
            geometry.slab, mesh, activity, guess, case.params, case.bcs, geometry.lateral_faces, config, step
        )
        report.did_connectivity_update = did_update
        report.incidents = geometry.incidents + report.incidents
        report.max_rel_error = relative_error(
            case, geometry.slab.upper_coords, flow, np.flatnonzero(now_assembled), t_np1
        )
        result.reports.append(report)
        result.incidents.extend(f"step {step}: {msg}" for msg in report.incidents)
        if config.verbose:
            err = "" if report.max_rel_error is None else f" err={report.max_rel_error:.2e}"
            flag = " [cyan]slip[/cyan]" if did_update else ""
            console.print(
                f"step {step:4d} t={t_np1:.4g} newton={report.newton_iters} "
                f"elems={report.n_active_elems}{err}{flag}"
            )

        positions = upper
        snapped = geometry.slab.upper_coords
        state = StepState(step, mesh, geometry.slab, activity, flow, report, geometry.lateral_faces)
        result.final = state
        if sink:
            sink(state)
    return result

"""
Stabilized space-time element residual and global slab assembly.

The element residual is written once as a pure JAX function of the element
unknowns; its exact linearization is obtained by forward-mode differentiation
and both are batched over all elements of one shape.
"""

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp

from .errors import MeshStructureError, TwistedElementError
from .mesh import (
    BoundaryFace,
    ElementShape,
    ElementValidity,
    Mesh2D,
    SpaceTimeSlab,
    classify_elements,
    element_diameter,
    shape_functions,
    spacetime_quadrature,
    spatial_quadrature,
    time_basis,
)
from .vring import ActivityState

jax.config.update("jax_enable_x64", True)

N_COMP = 3  # u, v, p
SPEED_FLOOR = 1e-300  # keeps |u| differentiable at rest


@dataclass(frozen=True)
class MaterialParams:
    rho: float
    mu: float
    body_force: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.rho <= 0 or self.mu <= 0:
            raise ValueError("Density and viscosity must be positive")

    @property
    def nu(self) -> float:
        return self.mu / self.rho


class StabParams(NamedTuple):
    tau_m: float
    tau_c: float


class PointState(NamedTuple):
    """Velocity, its time derivative and gradients at one or more quadrature points."""

    u: np.ndarray  # (..., 2)
    u_t: np.ndarray  # (..., 2)
    grad_u: np.ndarray  # (..., 2, 2), grad_u[c, i] = d u_c / d x_i
    grad_p: np.ndarray  # (..., 2)


DirichletFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def constant_velocity(u: float, v: float) -> DirichletFn:
    """Dirichlet data with a fixed velocity vector."""

    def g(x, y, t):
        out = np.empty((np.size(x), 2))
        out[:, 0], out[:, 1] = u, v
        return out

    return g


@dataclass
class BCSet:
    """
    Boundary conditions keyed by face marker.

    Dirichlet callables receive node coordinates (x, y) and the time and return
    an (m, 2) velocity array. Neumann entries are constant tractions. Markers
    listed in neither are traction-free.
    """

    dirichlet: dict[str, DirichletFn] = field(default_factory=dict)
    neumann: dict[str, tuple[float, float]] = field(default_factory=dict)
    pressure_pin: tuple[int, float] | None = None  # (node, value)


@dataclass
class FlowField:
    """Nodal velocity/pressure at both slab levels, plus the previous slab's upper velocity."""

    u_lower: np.ndarray
    u_upper: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    u_minus: np.ndarray

    @classmethod
    def zeros(cls, n_nodes: int) -> "FlowField":
        z2 = np.zeros((n_nodes, 2))
        z1 = np.zeros(n_nodes)
        return cls(z2.copy(), z2.copy(), z1.copy(), z1.copy(), z2.copy())

    @classmethod
    def steady(cls, u: np.ndarray, p: np.ndarray) -> "FlowField":
        """Same state at both levels and as the previous upper value."""
        u = np.asarray(u, dtype=float)
        p = np.asarray(p, dtype=float)
        return cls(u.copy(), u.copy(), p.copy(), p.copy(), u.copy())

    @property
    def n_nodes(self) -> int:
        return len(self.p_lower)

    def unknowns(self) -> np.ndarray:
        """Flat vector with DOF index (level * n_nodes + node) * 3 + component."""
        U = np.empty((2, self.n_nodes, N_COMP))
        U[0, :, :2], U[0, :, 2] = self.u_lower, self.p_lower
        U[1, :, :2], U[1, :, 2] = self.u_upper, self.p_upper
        return U.ravel()

    def with_unknowns(self, vec: np.ndarray) -> "FlowField":
        U = np.asarray(vec).reshape(2, self.n_nodes, N_COMP)
        return FlowField(
            U[0, :, :2].copy(), U[1, :, :2].copy(), U[0, :, 2].copy(), U[1, :, 2].copy(), self.u_minus
        )


def dof_index(level: int, node, comp, n_nodes: int):
    return (level * n_nodes + np.asarray(node)) * N_COMP + np.asarray(comp)


# ---------------------------------------------------------------------------
# Pointwise pieces
# ---------------------------------------------------------------------------


def stabilization_parameters(dt, h, speed, nu):
    """
    tau_M = ((2/dt)^2 + (2|u|/h)^2 + (4 nu / h^2)^2)^(-1/2), tau_C = max(h |u| / 2, 1e-3 h^2 / dt).

    Works on floats, numpy and JAX arrays alike.
    """
    tau_m = ((2.0 / dt) ** 2 + (2.0 * speed / h) ** 2 + (4.0 * nu / h**2) ** 2) ** -0.5
    tau_c = jnp.maximum(0.5 * h * speed, 1e-3 * h**2 / dt)
    return tau_m, tau_c


def strong_residual(state: PointState, rho, force):
    """
    Strong-form residuals with viscous second derivatives dropped (linear elements).

    Returns:
        (momentum residual rho (u_t + u.grad u - f) + grad p, divergence)
    """
    force = jnp.asarray(force, dtype=float)
    advection = (state.grad_u * state.u[..., None, :]).sum(-1)
    momentum = rho * (state.u_t + advection - force) + state.grad_p
    divergence = state.grad_u[..., 0, 0] + state.grad_u[..., 1, 1]
    return momentum, divergence


def compute_tau(
    slab: SpaceTimeSlab, mesh: Mesh2D, index: int, flow: FlowField, params: MaterialParams
) -> StabParams:
    """Stabilization parameters of one element from its mean nodal velocity."""
    nodes = list(mesh.elements[index].nodes)
    h = max(element_diameter(slab.lower_coords[nodes]), element_diameter(slab.upper_coords[nodes]))
    ubar = 0.5 * (flow.u_lower[nodes].mean(0) + flow.u_upper[nodes].mean(0))
    speed = (float(ubar @ ubar) + SPEED_FLOOR) ** 0.5
    tau_m, tau_c = stabilization_parameters(slab.dt, h, speed, params.nu)
    return StabParams(float(tau_m), float(tau_c))


# ---------------------------------------------------------------------------
# Element kernel
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def element_kernels(shape: ElementShape, n_gauss: int | None = None):
    """
    Batched element residual and Jacobian for one element shape.

    Returns:
        (residual_fn, jacobian_fn); both take per-element arrays
        U (E, 2, n, 3), Um (E, n, 2), X_lo (E, n, 2), X_up (E, n, 2), h (E,),
        jump_on (E,) and shared dt, rho, mu, force (2,).
    """
    rule = spacetime_quadrature(shape, n_gauss)
    N, dN = shape_functions(shape, rule.points)
    T = time_basis(rule.times)
    dT = np.array([-0.5, 0.5])
    w = rule.weights
    jump_pts, jump_w = spatial_quadrature(shape, n_gauss)
    Nj, dNj = shape_functions(shape, jump_pts)

    Phi = T[:, :, None] * N[:, None, :]  # (q, l, a)

    def residual(U, Um, X_lo, X_up, h, jump_on, dt, rho, mu, force):
        Xq = T[:, 0, None, None] * X_lo + T[:, 1, None, None] * X_up  # (q, a, i)
        J = jnp.einsum("qak,qai->qik", dN, Xq)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        K = jnp.stack(
            [jnp.stack([J[:, 1, 1], -J[:, 0, 1]], -1), jnp.stack([-J[:, 1, 0], J[:, 0, 0]], -1)], -2
        ) / det[:, None, None]
        G = jnp.einsum("qak,qki->qai", dN, K)  # spatial gradients of N
        t_theta = 0.5 * dt
        x_theta = 0.5 * jnp.einsum("qa,ai->qi", N, X_up - X_lo)
        dQ = w * det * t_theta

        grad_phi = T[:, :, None, None] * G[:, None, :, :]  # (q, l, a, i)
        phi_t = (dT[None, :, None] * N[:, None, :] - jnp.einsum("qlai,qi->qla", grad_phi, x_theta)) / t_theta

        vel_nodes = U[..., :2]
        p_nodes = U[..., 2]
        vel = jnp.einsum("qla,lac->qc", Phi, vel_nodes)
        grad_u = jnp.einsum("qlai,lac->qci", grad_phi, vel_nodes)
        grad_p = jnp.einsum("qlai,la->qi", grad_phi, p_nodes)
        u_t = jnp.einsum("qla,lac->qc", phi_t, vel_nodes)
        p = jnp.einsum("qla,la->q", Phi, p_nodes)

        momentum, div = strong_residual(PointState(vel, u_t, grad_u, grad_p), rho, force)
        inertia = momentum - grad_p  # rho (u_t + u.grad u - f)
        sigma = -p[:, None, None] * jnp.eye(2) + mu * (grad_u + jnp.swapaxes(grad_u, 1, 2))

        ubar = jnp.mean(vel_nodes, axis=(0, 1))
        speed = (ubar @ ubar + SPEED_FLOOR) ** 0.5
        tau_m, tau_c = stabilization_parameters(dt, h, speed, mu / rho)

        supg = jnp.einsum("qi,qlai->qla", vel, grad_phi)
        r_mom = (
            jnp.einsum("qla,qc->qlac", Phi, inertia)
            + jnp.einsum("qlai,qci->qlac", grad_phi, sigma)
            + tau_m * jnp.einsum("qla,qc->qlac", supg, momentum)
            + tau_c * rho * grad_phi * div[:, None, None, None]
        )
        r_cont = Phi * div[:, None, None] + (tau_m / rho) * jnp.einsum("qlai,qi->qla", grad_phi, momentum)
        R_mom = jnp.einsum("q,qlac->lac", dQ, r_mom)
        R_cont = jnp.einsum("q,qla->la", dQ, r_cont)

        # Jump in time over the lower level, weighted by lower-level test functions
        Jl = jnp.einsum("sak,ai->sik", dNj, X_lo)
        det_l = Jl[:, 0, 0] * Jl[:, 1, 1] - Jl[:, 0, 1] * Jl[:, 1, 0]
        du = jnp.einsum("sa,ac->sc", Nj, vel_nodes[0] - Um)
        jump = rho * jnp.einsum("s,sa,sc->ac", jump_w * det_l, Nj, du)
        R_mom = R_mom.at[0].add(jump_on * jump)

        return jnp.concatenate([R_mom, R_cont[..., None]], axis=-1).reshape(-1)

    in_axes = (0, 0, 0, 0, 0, 0, None, None, None, None)
    residual_fn = jax.jit(jax.vmap(residual, in_axes=in_axes))
    jacobian_fn = jax.jit(jax.vmap(jax.jacfwd(residual, argnums=0), in_axes=in_axes))
    return residual_fn, jacobian_fn


def jump_term_contribution(
    slab: SpaceTimeSlab,
    mesh: Mesh2D,
    index: int,
    flow: FlowField,
    activity: ActivityState,
    params: MaterialParams,
) -> np.ndarray:
    """
    Lower-level momentum contribution int N_a rho (u+ - u-) dOmega of one element.

    Returns zeros when the element was not assembled on the previous slab.

    Returns:
        (n_nodes_of_element, 2) array
    """
    elem = mesh.elements[index]
    nodes = list(elem.nodes)
    if not activity.elem_active_prev[index]:
        return np.zeros((len(nodes), 2))
    pts, wts = spatial_quadrature(elem.shape)
    N, dN = shape_functions(elem.shape, pts)
    J = np.einsum("sak,ai->sik", dN, slab.lower_coords[nodes])
    det = np.linalg.det(J)
    du = N @ (flow.u_lower[nodes] - flow.u_minus[nodes])
    return params.rho * np.einsum("s,sa,sc->ac", wts * det, N, du)


# ---------------------------------------------------------------------------
# Global assembly
# ---------------------------------------------------------------------------


class DirichletData(NamedTuple):
    dofs: np.ndarray
    values: np.ndarray
    empty_markers: list[str]


@dataclass
class SlabSystem:
    residual: np.ndarray
    matrix: sp.csr_matrix | None
    masked: np.ndarray  # DOFs eliminated from the free system
    dirichlet: DirichletData
    assembled: np.ndarray  # element mask actually integrated
    skipped: list[int] = field(default_factory=list)

    @property
    def n_free_dofs(self) -> int:
        return int((~self.masked).sum())


def collect_dirichlet(
    mesh: Mesh2D,
    slab: SpaceTimeSlab,
    bcs: BCSet,
    faces: list[BoundaryFace],
    assembled: np.ndarray,
) -> DirichletData:
    """
    Velocity constraints on faces of assembled elements at both slab levels, plus
    the pressure pin.

    Later markers in `bcs.dirichlet` overwrite earlier ones at shared nodes.
    """
    n = mesh.n_nodes
    values: dict[int, float] = {}
    empty = []
    for marker, g in bcs.dirichlet.items():
        nodes = sorted({
            node for f in faces if f.marker == marker and assembled[f.element]
            for node in mesh.face_nodes(f)
        })
        if not nodes:
            empty.append(marker)
            continue
        nodes = np.array(nodes)
        for level, (coords, t) in enumerate(
            ((slab.lower_coords, slab.t_lower), (slab.upper_coords, slab.t_upper))
        ):
            uv = np.asarray(g(coords[nodes, 0], coords[nodes, 1], t), dtype=float).reshape(-1, 2)
            for c in range(2):
                values.update(zip(dof_index(level, nodes, c, n).tolist(), uv[:, c].tolist()))
    if bcs.pressure_pin is not None:
        node, p = bcs.pressure_pin
        for level in (0, 1):
            values[int(dof_index(level, node, 2, n))] = float(p)
    dofs = np.array(sorted(values), dtype=int)
    return DirichletData(dofs, np.array([values[d] for d in dofs]), empty)


def neumann_vector(
    mesh: Mesh2D, slab: SpaceTimeSlab, bcs: BCSet, faces: list[BoundaryFace], assembled: np.ndarray
) -> np.ndarray:
    """Consistent nodal loads int w . h dP over traction faces, both levels."""
    n = mesh.n_nodes
    load = np.zeros(2 * n * N_COMP)
    g, gw = np.polynomial.legendre.leggauss(2)
    T = time_basis(g)  # (t, l)
    Ne = np.stack([(1 - g) / 2, (1 + g) / 2], axis=1)  # (s, a)
    for face in faces:
        traction = bcs.neumann.get(face.marker)
        if traction is None or not assembled[face.element] or not np.any(traction):
            continue
        a, b = mesh.face_nodes(face)
        for it, theta_w in enumerate(gw):
            xa = T[it, 0] * slab.lower_coords[a] + T[it, 1] * slab.upper_coords[a]
            xb = T[it, 0] * slab.lower_coords[b] + T[it, 1] * slab.upper_coords[b]
            length = np.linalg.norm(xb - xa)
            for s, s_w in enumerate(gw):
                dP = s_w * theta_w * 0.5 * length * 0.5 * slab.dt
                for level in (0, 1):
                    for k, node in enumerate((a, b)):
                        phi = Ne[s, k] * T[it, level]
                        for c in range(2):
                            load[dof_index(level, node, c, n)] += dP * phi * traction[c]
    return load


def apply_dirichlet(system: SlabSystem, unknowns: np.ndarray) -> SlabSystem:
    """
    Eliminate masked DOFs: zero rows and columns, unit diagonal.

    The residual at a Dirichlet DOF becomes (U - g), so a Newton update moves the
    iterate onto the prescribed value; inactive DOFs get residual 0.
    """
    masked = system.masked
    residual = system.residual.copy()
    residual[masked] = 0.0
    d = system.dirichlet
    residual[d.dofs] = unknowns[d.dofs] - d.values
    matrix = system.matrix
    if matrix is not None:
        keep = sp.diags((~masked).astype(float))
        matrix = (keep @ matrix @ keep + sp.diags(masked.astype(float))).tocsr()
    return SlabSystem(residual, matrix, masked, d, system.assembled, system.skipped)


def _reference_geometry(shape: ElementShape, n: int) -> np.ndarray:
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]) if shape is ElementShape.TRI3 else np.array(
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    )
    return np.broadcast_to(xy, (n, *xy.shape)).copy()


def assemble_slab_system(
    slab: SpaceTimeSlab,
    mesh: Mesh2D,
    activity: ActivityState,
    flow: FlowField,
    params: MaterialParams,
    bcs: BCSet,
    lateral_faces: list[BoundaryFace] | None = None,
    with_jacobian: bool = True,
    n_gauss: int | None = None,
    deterministic: bool = True,
) -> SlabSystem:
    """
    Assemble the nonlinear residual R(U) and its Jacobian for one slab.

    Only active, non-skipped elements are integrated; elements that turn out
    collapsing are skipped here as well. Each element shape is evaluated as one
    batch. With `deterministic` the batches are summed in fixed shape order, so
    repeated assemblies are bit-identical; otherwise they run on a thread pool
    and are summed as they finish.

    Raises:
        TwistedElementError: an assembled element is twisted
        MeshStructureError: flow arrays do not match the mesh
    """
    n = mesh.n_nodes
    if flow.n_nodes != n:
        raise MeshStructureError(f"Flow field has {flow.n_nodes} nodes, mesh has {n}")
    assembled = activity.elem_active & ~activity.elem_skipped
    verdict = classify_elements(slab, mesh, np.flatnonzero(assembled))
    skipped = []
    for i, v in verdict.items():
        if v is ElementValidity.TWISTED:
            raise TwistedElementError(i)
        if v is ElementValidity.COLLAPSING:
            skipped.append(i)
    assembled = assembled.copy()
    assembled[skipped] = False

    U_glob = flow.unknowns()
    U_nodes = U_glob.reshape(2, n, N_COMP)
    n_dofs = U_glob.size
    prev = activity.elem_active_prev

    def shape_group(shape: ElementShape):
        # Whole shape groups keep the batch size fixed between steps; elements
        # outside the assembled set get a reference geometry and are dropped below
        ids = np.array([i for i, e in enumerate(mesh.elements) if e.shape is shape], dtype=int)
        if len(ids) == 0 or not assembled[ids].any():
            return None
        live = assembled[ids]
        conn = np.array([mesh.elements[i].nodes for i in ids], dtype=int)
        X_lo = slab.lower_coords[conn]
        X_up = slab.upper_coords[conn]
        ref = _reference_geometry(shape, int((~live).sum()))
        X_lo[~live] = ref
        X_up[~live] = ref
        diff_lo = X_lo[:, :, None, :] - X_lo[:, None, :, :]
        diff_up = X_up[:, :, None, :] - X_up[:, None, :, :]
        h = np.maximum(
            np.sqrt((diff_lo**2).sum(-1)).max(axis=(1, 2)), np.sqrt((diff_up**2).sum(-1)).max(axis=(1, 2))
        )
        U_loc = np.transpose(U_nodes[:, conn, :], (1, 0, 2, 3))
        Um_loc = flow.u_minus[conn]
        U_loc[~live] = 0.0
        jump_on = prev[ids].astype(float)
        residual_fn, jacobian_fn = element_kernels(shape, n_gauss)
        args = (U_loc, Um_loc, X_lo, X_up, h, jump_on, slab.dt, params.rho, params.mu,
                np.asarray(params.body_force, dtype=float))
        R_loc = np.asarray(residual_fn(*args))

        nen = shape.n_nodes
        level = np.repeat(np.arange(2), nen * N_COMP)
        local_node = np.tile(np.repeat(np.arange(nen), N_COMP), 2)
        comp = np.tile(np.arange(N_COMP), 2 * nen)
        gdof = (level[None, :] * n + conn[:, local_node]) * N_COMP + comp[None, :]
        gdof, R_loc = gdof[live], R_loc[live]
        J_loc = None
        if with_jacobian:
            J_loc = np.asarray(jacobian_fn(*args))[live].reshape(len(gdof), 2 * nen * N_COMP, 2 * nen * N_COMP)
        return gdof, R_loc, J_loc

    if deterministic:
        groups = [shape_group(shape) for shape in ElementShape]
    else:
        with ThreadPoolExecutor(max_workers=len(ElementShape)) as pool:
            futures = [pool.submit(shape_group, shape) for shape in ElementShape]
            groups = [f.result() for f in as_completed(futures)]

    residual = np.zeros(n_dofs)
    rows, cols, vals = [], [], []
    for group in groups:
        if group is None:
            continue
        gdof, R_loc, J_loc = group
        residual += np.bincount(gdof.ravel(), weights=R_loc.ravel(), minlength=n_dofs)
        if J_loc is not None:
            rows.append(np.repeat(gdof, gdof.shape[1], axis=1).ravel())
            cols.append(np.tile(gdof, (1, gdof.shape[1])).ravel())
            vals.append(J_loc.ravel())

    faces = list(mesh.boundary_faces) + list(lateral_faces or [])
    residual -= neumann_vector(mesh, slab, bcs, faces, assembled)

    matrix = None
    if with_jacobian:
        if rows:
            matrix = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_dofs, n_dofs)
            ).tocsr()
        else:
            matrix = sp.csr_matrix((n_dofs, n_dofs))

    node_used = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(assembled):
        node_used[list(mesh.elements[i].nodes)] = True
    masked = np.repeat(np.tile(~node_used, 2), N_COMP)
    dirichlet = collect_dirichlet(mesh, slab, bcs, faces, assembled)
    masked[dirichlet.dofs] = True
    system = SlabSystem(residual, matrix, masked, dirichlet, assembled, skipped)
    return apply_dirichlet(system, U_glob)

"""
Unit tests for the stabilized space-time residual and slab assembly.
"""

import numpy as np
import pytest

from ringslip.assembly import (
    N_COMP,
    BCSet,
    FlowField,
    MaterialParams,
    PointState,
    assemble_slab_system,
    collect_dirichlet,
    compute_tau,
    dof_index,
    element_kernels,
    jump_term_contribution,
    neumann_vector,
    stabilization_parameters,
    strong_residual,
)
from ringslip.cases import grid_mesh, merge_meshes, nozzle_velocity
from ringslip.errors import TwistedElementError
from ringslip.mesh import ElementShape, SpaceTimeSlab, extrude_slab
from ringslip.solver import run_time_loop
from ringslip.vring import (
    ActivityState,
    advance_motion,
    initial_positions,
    resolve_slab_geometry,
    shift_nodes,
    update_activity,
)


def all_active(mesh, prev=True):
    """Activity with every element assembled."""
    return ActivityState(
        node_active=np.ones(mesh.n_nodes, dtype=bool),
        elem_active=np.ones(mesh.n_elements, dtype=bool),
        elem_active_prev=np.full(mesh.n_elements, prev),
        node_shifted=np.zeros(mesh.n_nodes, dtype=bool),
    )


def random_flow(mesh, seed=0):
    rng = np.random.default_rng(seed)
    n = mesh.n_nodes
    return FlowField(
        rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), rng.normal(size=n), rng.normal(size=n),
        rng.normal(size=(n, 2)),
    )


def couette_first_slab(case):
    """Geometry and exact flow of the first Couette slab."""
    mesh, ring = case.mesh, case.ring
    pos = initial_positions(mesh, ring)
    act = update_activity(mesh, ring, pos, np.zeros(mesh.n_nodes, dtype=bool))
    start = resolve_slab_geometry(mesh, ring, pos, pos, -case.dt, 0.0, act)
    upper = advance_motion(SpaceTimeSlab(pos, pos, 0.0, case.dt), ring, case.motion).upper_coords
    upper, lower, shifted = shift_nodes(ring, upper, start.slab.upper_coords)
    act = update_activity(mesh, ring, upper, shifted, prev=start.activity)
    geometry = resolve_slab_geometry(mesh, ring, lower, upper, 0.0, case.dt, act, step=1)
    return geometry, case.initial_flow


def deformed_slab_mesh(shape):
    """At most four elements: 2x2 quads or 2x1 cells split into triangles."""
    if shape is ElementShape.QUAD4:
        return grid_mesh(np.linspace(0, 2, 3), np.linspace(0, 2, 3), {})
    return grid_mesh(np.linspace(0, 2, 3), np.linspace(0, 1, 2), {}, shape=ElementShape.TRI3)


def dense_rule(shape, n):
    """(reference point, weight) pairs; triangles via the collapse (s, t) -> (s (1 - t), t)."""
    g, w = np.polynomial.legendre.leggauss(n)
    if shape is ElementShape.QUAD4:
        return [(np.array([a, b]), wa * wb) for a, wa in zip(g, w) for b, wb in zip(g, w)]
    s, ws = (1 + g) / 2, w / 2
    return [(np.array([a * (1 - b), b]), wa * wb * (1 - b)) for a, wa in zip(s, ws) for b, wb in zip(s, ws)]


def linear_basis(shape, point):
    x, y = point
    if shape is ElementShape.TRI3:
        return np.array([1 - x - y, x, y]), np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    sx = np.array([-1.0, 1.0, 1.0, -1.0])
    sy = np.array([-1.0, -1.0, 1.0, 1.0])
    N = 0.25 * (1 + sx * x) * (1 + sy * y)
    dN = 0.25 * np.column_stack([sx * (1 + sy * y), sy * (1 + sx * x)])
    return N, dN


def reference_element_residual(shape, U, Um, X_lo, X_up, h, jump_on, dt, rho, mu, force, n=10):
    """
    Element residual by dense quadrature in physical space-time.

    Gradients come from inverting the full 3x3 map (xi, eta, theta) -> (x, y, t).
    Layout matches the kernel: (level, node, [u, v, p]) flattened.
    """
    force = np.asarray(force, dtype=float)
    X = np.stack([X_lo, X_up])  # (l, a, i)
    vel_nodes, p_nodes = U[..., :2], U[..., 2]
    nen = shape.n_nodes
    ubar = vel_nodes.reshape(-1, 2).mean(0)
    speed = np.sqrt(ubar @ ubar + 1e-300)
    tau_m = ((2 / dt) ** 2 + (2 * speed / h) ** 2 + (4 * mu / rho / h**2) ** 2) ** -0.5
    tau_c = max(0.5 * h * speed, 1e-3 * h**2 / dt)
    dT = np.array([-0.5, 0.5])
    R_mom = np.zeros((2, nen, 2))
    R_cont = np.zeros((2, nen))
    g, w = np.polynomial.legendre.leggauss(n)
    for point, w_s in dense_rule(shape, n):
        N, dN = linear_basis(shape, point)
        for theta, w_t in zip(g, w):
            T = np.array([(1 - theta) / 2, (1 + theta) / 2])
            F = np.zeros((3, 3))
            F[:2, :2] = np.einsum("l,lai,ak->ik", T, X, dN)
            F[:2, 2] = np.einsum("l,lai,a->i", dT, X, N)
            F[2, 2] = dt / 2
            ref_grad = np.concatenate([T[:, None, None] * dN[None], (dT[:, None] * N[None])[..., None]], axis=-1)
            grad = ref_grad @ np.linalg.inv(F)  # (l, a, [x, y, t])
            gx, gt = grad[..., :2], grad[..., 2]
            phi = np.outer(T, N)

            vel = np.einsum("la,lac->c", phi, vel_nodes)
            p = np.einsum("la,la->", phi, p_nodes)
            grad_u = np.einsum("lai,lac->ci", gx, vel_nodes)
            grad_p = np.einsum("lai,la->i", gx, p_nodes)
            u_t = np.einsum("la,lac->c", gt, vel_nodes)
            inertia = rho * (u_t + grad_u @ vel - force)
            momentum = inertia + grad_p
            div = np.trace(grad_u)
            sigma = -p * np.eye(2) + mu * (grad_u + grad_u.T)
            supg = gx @ vel

            dQ = w_s * w_t * np.linalg.det(F)
            R_mom += dQ * (
                phi[..., None] * inertia + gx @ sigma.T + tau_m * supg[..., None] * momentum
                + tau_c * rho * div * gx
            )
            R_cont += dQ * (phi * div + (tau_m / rho) * (gx @ momentum))

    for point, w_s in dense_rule(shape, n):
        N, dN = linear_basis(shape, point)
        det = np.linalg.det(X_lo.T @ dN)
        du = N @ (vel_nodes[0] - Um)
        R_mom[0] += jump_on * w_s * det * rho * np.outer(N, du)
    return np.concatenate([R_mom, R_cont[..., None]], axis=-1).ravel()


def random_element(shape, rng, translate=True, deform=True):
    """Counter-clockwise element perturbed at both levels."""
    if shape is ElementShape.TRI3:
        base = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    else:
        base = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    jitter = 0.1 if deform else 0.0
    X_lo = base + rng.uniform(-jitter, jitter, base.shape)
    shift = rng.uniform(-0.2, 0.2, 2) if translate else np.zeros(2)
    X_up = X_lo + shift + (rng.uniform(-jitter, jitter, base.shape) if deform else 0.0)
    return X_lo, X_up


def kernel_residual(shape, n_gauss, U, Um, X_lo, X_up, h, jump_on, dt, rho, mu, force):
    residual_fn, _ = element_kernels(shape, n_gauss)
    out = residual_fn(U[None], Um[None], X_lo[None], X_up[None], np.array([h]), np.array([float(jump_on)]),
                      dt, rho, mu, np.asarray(force, dtype=float))
    return np.asarray(out)[0]


def element_size(X_lo, X_up):
    return max(np.linalg.norm(X[:, None] - X[None], axis=-1).max() for X in (X_lo, X_up))


class TestStabilization:
    """Tests for tau_M and tau_C."""

    def test_couette_values(self):
        """dt=0.2, h=0.02, |u|=0.02, nu=0.025 gives (100 + 4 + 62500)^(-1/2)."""
        tau_m, _ = stabilization_parameters(0.2, 0.02, 0.02, 0.025)
        assert float(tau_m) == pytest.approx(62604**-0.5)
        assert float(tau_m) == pytest.approx(3.9967e-3, rel=1e-4)

    def test_stagnant_floor(self):
        """At rest tau_C equals its floor."""
        _, tau_c = stabilization_parameters(0.2, 0.02, 0.0, 0.025)
        assert float(tau_c) == pytest.approx(1e-3 * 0.02**2 / 0.2)

    def test_advective_limit(self):
        """Long steps and vanishing viscosity leave h / (2|u|)."""
        tau_m, _ = stabilization_parameters(1e12, 0.02, 1.0, 1e-14)
        assert float(tau_m) == pytest.approx(0.01)

    def test_compute_tau_uses_element_size(self, unit_quad, water):
        """Element diameter of the unit square enters tau."""
        c = unit_quad.node_coords
        slab = extrude_slab(unit_quad, c, c, 0.0, 0.1)
        flow = FlowField.steady(np.tile([1.0, 0.0], (4, 1)), np.zeros(4))
        tau = compute_tau(slab, unit_quad, 0, flow, water)
        expected, _ = stabilization_parameters(0.1, np.sqrt(2), 1.0, water.nu)
        assert tau.tau_m == pytest.approx(float(expected))


class TestStrongResidual:
    """Tests for the pointwise strong residual."""

    def test_exact_couette_state(self):
        """Linear shear with constant pressure satisfies the equations."""
        state = PointState(
            u=np.array([0.01, 0.0]), u_t=np.zeros(2),
            grad_u=np.array([[0.0, 0.02], [0.0, 0.0]]), grad_p=np.zeros(2),
        )
        momentum, div = strong_residual(state, 100.0, (0.0, 0.0))
        assert np.allclose(momentum, 0.0)
        assert float(div) == 0.0

    def test_forcing_only(self):
        """Fluid at rest under f=(1, 0), rho=2."""
        state = PointState(np.zeros(2), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        momentum, _ = strong_residual(state, 2.0, (1.0, 0.0))
        assert np.allclose(momentum, [-2.0, 0.0])

    def test_time_derivative_only(self):
        """Uniform flow accelerating in time gives rho du/dt."""
        state = PointState(np.array([1.0, 0.0]), np.array([3.0, -1.0]), np.zeros((2, 2)), np.zeros(2))
        momentum, _ = strong_residual(state, 2.0, (0.0, 0.0))
        assert np.allclose(momentum, [6.0, -2.0])

    def test_pressure_gradient(self):
        """Pressure gradient adds directly."""
        state = PointState(np.zeros(2), np.zeros(2), np.zeros((2, 2)), np.array([0.5, 2.0]))
        momentum, _ = strong_residual(state, 1.0, (0.0, 0.0))
        assert np.allclose(momentum, [0.5, 2.0])


class TestJumpTerm:
    """Tests for the temporal jump contribution."""

    def test_continuous_state(self, unit_quad):
        """u+ = u- contributes nothing."""
        c = unit_quad.node_coords
        slab = extrude_slab(unit_quad, c, c, 0.0, 0.1)
        flow = FlowField.steady(np.ones((4, 2)), np.zeros(4))
        out = jump_term_contribution(slab, unit_quad, 0, flow, all_active(unit_quad), MaterialParams(100, 1))
        assert np.all(out == 0.0)

    def test_newly_active_element(self, unit_quad):
        """Elements not assembled on the previous slab skip the jump."""
        c = unit_quad.node_coords
        slab = extrude_slab(unit_quad, c, c, 0.0, 0.1)
        flow = FlowField.zeros(4)
        flow.u_lower[:] = 5.0
        act = all_active(unit_quad, prev=False)
        out = jump_term_contribution(slab, unit_quad, 0, flow, act, MaterialParams(100, 1))
        assert np.all(out == 0.0)

    def test_uniform_jump(self, unit_quad):
        """rho=100, jump (0.01, 0) on the unit square: each node gets rho 0.01 / 4."""
        c = unit_quad.node_coords
        slab = extrude_slab(unit_quad, c, c, 0.0, 0.1)
        flow = FlowField.zeros(4)
        flow.u_lower[:, 0] = 0.01
        out = jump_term_contribution(slab, unit_quad, 0, flow, all_active(unit_quad), MaterialParams(100, 1))
        assert np.allclose(out[:, 0], 0.25)
        assert np.allclose(out[:, 1], 0.0)

    def test_jump_matches_assembled_residual(self, unit_quad):
        """The kernel's lower-level momentum rows include the same jump."""
        c = unit_quad.node_coords
        slab = extrude_slab(unit_quad, c, c, 0.0, 0.1)
        params = MaterialParams(100.0, 1.0)
        flow = FlowField.zeros(4)
        flow.u_lower[:, 0] = 0.01
        flow.u_upper[:, 0] = 0.01
        with_jump = assemble_slab_system(slab, unit_quad, all_active(unit_quad), flow, params, BCSet(),
                                         with_jacobian=False)
        without = assemble_slab_system(slab, unit_quad, all_active(unit_quad, prev=False), flow, params,
                                       BCSet(), with_jacobian=False)
        diff = (with_jump.residual - without.residual).reshape(2, 4, N_COMP)
        assert np.allclose(diff[0, :, 0], 0.25)
        assert np.allclose(diff[1], 0.0)


class TestAssembly:
    """Tests for assemble_slab_system."""

    def test_exact_couette_state(self, couette_case):
        """The exact shear flow leaves only roundoff in the first slab's residual."""
        geometry, flow = couette_first_slab(couette_case)
        system = assemble_slab_system(
            geometry.slab, couette_case.mesh, geometry.activity, flow, couette_case.params,
            couette_case.bcs, geometry.lateral_faces, with_jacobian=False,
        )
        assert np.abs(system.residual).max() < 1e-12

    def test_single_element_mask(self, quad_grid, water):
        """Only the active element's 4 nodes stay free, at both levels."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        act = all_active(quad_grid)
        act.elem_active[1:] = False
        system = assemble_slab_system(slab, quad_grid, act, random_flow(quad_grid), water, BCSet())
        assert system.n_free_dofs == 4 * N_COMP * 2
        assert np.all(system.residual[system.masked] == 0.0)

    def test_masked_rows_are_identity(self, quad_grid, water):
        """Eliminated DOFs keep a unit diagonal and no coupling."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        act = all_active(quad_grid)
        act.elem_active[1:] = False
        system = assemble_slab_system(slab, quad_grid, act, random_flow(quad_grid), water, BCSet())
        masked = np.flatnonzero(system.masked)
        block = system.matrix[masked][:, masked].toarray()
        assert np.array_equal(block, np.eye(len(masked)))
        assert not system.matrix[masked][:, ~system.masked].toarray().any()

    @pytest.mark.parametrize("seed", range(10))
    def test_jacobian_on_random_deformed_slabs(self, seed):
        """Forward-mode Jacobian agrees entry by entry with central differences."""
        rng = np.random.default_rng(seed)
        shape = ElementShape.TRI3 if seed % 2 else ElementShape.QUAD4
        mesh = deformed_slab_mesh(shape)
        c = mesh.node_coords
        lower = c + rng.uniform(-0.1, 0.1, c.shape)
        upper = lower + rng.uniform(-0.2, 0.2, 2) + rng.uniform(-0.1, 0.1, c.shape)
        slab = extrude_slab(mesh, lower, upper, 0.0, rng.uniform(0.05, 0.5))
        act = all_active(mesh)
        act.elem_active_prev[:] = rng.random(mesh.n_elements) < 0.5
        params = MaterialParams(rng.uniform(1.0, 10.0), rng.uniform(0.05, 1.0), tuple(rng.normal(size=2)))
        flow = random_flow(mesh, seed)
        J = assemble_slab_system(slab, mesh, act, flow, params, BCSet()).matrix.toarray()
        U = flow.unknowns()
        eps = 1e-6
        fd = np.empty_like(J)
        for j in range(U.size):
            e = np.zeros(U.size)
            e[j] = eps
            plus = assemble_slab_system(slab, mesh, act, flow.with_unknowns(U + e), params, BCSet(),
                                        with_jacobian=False).residual
            minus = assemble_slab_system(slab, mesh, act, flow.with_unknowns(U - e), params, BCSet(),
                                         with_jacobian=False).residual
            fd[:, j] = (plus - minus) / (2 * eps)
        scale = np.abs(J).max()
        err = np.abs(J - fd)
        assert err.max() <= 1e-7 * scale
        significant = np.abs(J) > 1e-3 * scale
        assert (err[significant] / np.abs(J[significant])).max() < 1e-5

    @pytest.mark.parametrize("seed", range(6))
    def test_kernel_matches_dense_reference(self, seed):
        """Element integrals agree with an independent dense-quadrature evaluation on deformed elements."""
        rng = np.random.default_rng(100 + seed)
        shape = ElementShape.TRI3 if seed % 2 else ElementShape.QUAD4
        X_lo, X_up = random_element(shape, rng)
        nen = shape.n_nodes
        U = rng.normal(size=(2, nen, 3))
        Um = rng.normal(size=(nen, 2))
        args = (U, Um, X_lo, X_up, element_size(X_lo, X_up), seed % 3 != 0, rng.uniform(0.05, 0.5),
                rng.uniform(1.0, 10.0), rng.uniform(0.05, 1.0), rng.normal(size=2))
        kernel = kernel_residual(shape, 8, *args)
        reference = reference_element_residual(shape, *args)
        np.testing.assert_allclose(kernel, reference, rtol=0, atol=1e-9 * np.abs(reference).max())

    @pytest.mark.parametrize("seed", range(4))
    def test_default_rule_exact_for_translating_triangles(self, seed):
        """The 3-point prism rule is exact for steady nodal data on a rigidly translating triangle."""
        rng = np.random.default_rng(200 + seed)
        X_lo, X_up = random_element(ElementShape.TRI3, rng, deform=False)
        X_lo = X_lo + rng.uniform(-0.1, 0.1, X_lo.shape)
        X_up = X_lo + (X_up - X_lo)[0]
        U = np.repeat(rng.normal(size=(1, 3, 3)), 2, axis=0)
        Um = rng.normal(size=(3, 2))
        args = (U, Um, X_lo, X_up, element_size(X_lo, X_up), True, 0.1, 2.0, 0.3, rng.normal(size=2))
        default = kernel_residual(ElementShape.TRI3, None, *args)
        reference = reference_element_residual(ElementShape.TRI3, *args)
        np.testing.assert_allclose(default, reference, rtol=0, atol=1e-11 * np.abs(reference).max())

    @pytest.mark.slow
    def test_exact_couette_state_every_step(self, couette_case):
        """|R(exact)| <= 1e-12 rho u_top^2 H on every slab of the 8-step run."""
        case = couette_case
        bound = 1e-12 * case.params.rho * case.velocity_scale**2 * 1.0
        norms = []

        def check(state):
            if state.step == 0:
                return
            slab = state.slab
            lower = case.exact_velocity(slab.lower_coords[:, 0], slab.lower_coords[:, 1], slab.t_lower)
            upper = case.exact_velocity(slab.upper_coords[:, 0], slab.upper_coords[:, 1], slab.t_upper)
            zero = np.zeros(state.mesh.n_nodes)
            exact = FlowField(lower, upper, zero, zero.copy(), lower.copy())
            system = assemble_slab_system(slab, state.mesh, state.activity, exact, case.params, case.bcs,
                                          state.lateral_faces, with_jacobian=False)
            norms.append(np.linalg.norm(system.residual))

        run_time_loop(case, 8, sink=check)
        assert len(norms) == 8
        assert max(norms) <= bound

    def test_thread_pool_assembly_matches_fixed_order(self, quad_grid, water):
        """Concurrent shape groups give the fixed-order system up to summation order."""
        tris = grid_mesh(np.linspace(3, 5, 3), np.linspace(0, 1, 2), {}, shape=ElementShape.TRI3)
        mesh = merge_meshes(quad_grid, tris)
        c = mesh.node_coords
        slab = extrude_slab(mesh, c, c + [0.05, 0.0], 0.0, 0.1)
        flow = random_flow(mesh, seed=11)
        act = all_active(mesh)
        fixed = assemble_slab_system(slab, mesh, act, flow, water, BCSet())
        pooled = assemble_slab_system(slab, mesh, act, flow, water, BCSet(), deterministic=False)
        scale = np.abs(fixed.residual).max()
        np.testing.assert_allclose(pooled.residual, fixed.residual, rtol=0, atol=1e-13 * scale)
        assert abs(pooled.matrix - fixed.matrix).max() <= 1e-13 * abs(fixed.matrix).max()

    def test_triangle_rule_matches_dense_rule(self, water):
        """Default prism rule is exact for spatially linear, steady data on an undeformed slab."""
        tris = grid_mesh(np.linspace(0, 1, 3), np.linspace(0, 1, 3), {}, shape=ElementShape.TRI3)
        c = tris.node_coords
        slab = extrude_slab(tris, c, c, 0.0, 0.1)
        u = np.column_stack([1.0 + 0.5 * c[:, 1], 0.2 - 0.3 * c[:, 0]])
        p = 2.0 * c[:, 0] - c[:, 1]
        flow = FlowField.steady(u, p)
        flow.u_minus = 0.5 * u
        act = all_active(tris)
        default = assemble_slab_system(slab, tris, act, flow, water, BCSet(), with_jacobian=False)
        dense = assemble_slab_system(slab, tris, act, flow, water, BCSet(), with_jacobian=False, n_gauss=5)
        np.testing.assert_allclose(default.residual, dense.residual, atol=1e-12)

    def test_skip_is_local(self, quad_grid, water):
        """Skipping one element changes the residual only at its own nodes."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        flow = random_flow(quad_grid, seed=5)
        full = assemble_slab_system(slab, quad_grid, all_active(quad_grid), flow, water, BCSet(),
                                    with_jacobian=False)
        act = all_active(quad_grid)
        act.elem_skipped[0] = True
        partial = assemble_slab_system(slab, quad_grid, act, flow, water, BCSet(), with_jacobian=False)
        changed = np.flatnonzero(full.residual != partial.residual)
        nodes = (changed // N_COMP) % quad_grid.n_nodes
        assert set(nodes.tolist()) <= set(quad_grid.elements[0].nodes)
        assert len(changed) > 0

    def test_translation_invariance(self, quad_grid, water):
        """Rigidly translated slabs give the same residual."""
        c = quad_grid.node_coords
        flow = random_flow(quad_grid, seed=7)
        act = all_active(quad_grid)
        base = assemble_slab_system(extrude_slab(quad_grid, c, c, 0.0, 0.1), quad_grid, act, flow, water,
                                    BCSet(), with_jacobian=False)
        moved = assemble_slab_system(extrude_slab(quad_grid, c + [5.0, 3.0], c + [5.0, 3.0], 0.0, 0.1),
                                     quad_grid, act, flow, water, BCSet(), with_jacobian=False)
        np.testing.assert_allclose(moved.residual, base.residual, atol=1e-10 * np.abs(base.residual).max())

    def test_repeatable(self, quad_grid, water):
        """Assembling twice is bit-identical."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        flow = random_flow(quad_grid)
        first = assemble_slab_system(slab, quad_grid, all_active(quad_grid), flow, water, BCSet())
        second = assemble_slab_system(slab, quad_grid, all_active(quad_grid), flow, water, BCSet())
        assert np.array_equal(first.residual, second.residual)
        assert (first.matrix != second.matrix).nnz == 0

    def test_twisted_element_aborts(self, unit_quad, water):
        """A mirrored upper level cannot be integrated."""
        c = unit_quad.node_coords
        upper = c.copy()
        upper[:, 0] = 1.0 - upper[:, 0]
        slab = extrude_slab(unit_quad, c, upper, 0.0, 0.1)
        with pytest.raises(TwistedElementError):
            assemble_slab_system(slab, unit_quad, all_active(unit_quad), FlowField.zeros(4), water, BCSet())


class TestBoundaryConditions:
    """Tests for Dirichlet and Neumann data."""

    def test_dof_layout(self):
        """DOF index is (level * n_nodes + node) * 3 + component."""
        assert dof_index(1, 2, 2, 10) == (10 + 2) * 3 + 2
        flow = FlowField.zeros(3)
        flow.p_upper[1] = 7.0
        assert flow.unknowns()[dof_index(1, 1, 2, 3)] == 7.0

    def test_nozzle_profile(self):
        """Parabola reaches -v at the centre and vanishes at the edges."""
        assert nozzle_velocity(0.1) == pytest.approx(-1.0)
        assert nozzle_velocity(0.095) == pytest.approx(0.0)
        assert nozzle_velocity(0.105) == pytest.approx(0.0)

    def test_couette_top_plate(self, couette_case):
        """Top plate velocity (0.02, 0) is imposed at both levels."""
        geometry, _ = couette_first_slab(couette_case)
        mesh = couette_case.mesh
        faces = list(mesh.boundary_faces) + geometry.lateral_faces
        data = collect_dirichlet(mesh, geometry.slab, couette_case.bcs, faces, geometry.activity.assembled)
        top = sorted({n for f in mesh.faces_with_marker("top") if geometry.activity.assembled[f.element]
                      for n in mesh.face_nodes(f)})
        lookup = dict(zip(data.dofs.tolist(), data.values.tolist()))
        for level in (0, 1):
            for node in top:
                assert lookup[int(dof_index(level, node, 0, mesh.n_nodes))] == pytest.approx(0.02)
                assert lookup[int(dof_index(level, node, 1, mesh.n_nodes))] == 0.0

    def test_empty_marker_reported(self, quad_grid):
        """A Dirichlet marker without faces is reported, not raised."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        bcs = BCSet(dirichlet={"nowhere": lambda x, y, t: np.zeros((np.size(x), 2))})
        data = collect_dirichlet(quad_grid, slab, bcs, quad_grid.boundary_faces,
                                 np.ones(quad_grid.n_elements, dtype=bool))
        assert data.empty_markers == ["nowhere"]
        assert len(data.dofs) == 0

    def test_pressure_pin(self, quad_grid):
        """The pin fixes pressure at both levels."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        data = collect_dirichlet(quad_grid, slab, BCSet(pressure_pin=(3, 1.5)), [],
                                 np.ones(quad_grid.n_elements, dtype=bool))
        assert data.dofs.tolist() == [int(dof_index(0, 3, 2, 12)), int(dof_index(1, 3, 2, 12))]
        assert np.all(data.values == 1.5)

    def test_neumann_total_force(self, quad_grid):
        """Tractions integrate to traction x face length x dt."""
        c = quad_grid.node_coords
        slab = extrude_slab(quad_grid, c, c, 0.0, 0.1)
        bcs = BCSet(neumann={"right": (1.0, -2.0)})
        load = neumann_vector(quad_grid, slab, bcs, quad_grid.boundary_faces,
                              np.ones(quad_grid.n_elements, dtype=bool))
        assert load[0::N_COMP].sum() == pytest.approx(2.0 * 0.1)
        assert load[1::N_COMP].sum() == pytest.approx(-4.0 * 0.1)
        assert np.all(load[2::N_COMP] == 0.0)

"""Hybrid mimetic scheme: local operators, assembly, flux recovery."""

import numpy as np
import pytest

from polyfv.mesh import Mesh, build_cartesian, build_triangular, perturb_random
from polyfv.problem import Problem, TensorField, manufactured_case
from polyfv.schemes import (
    SchemeError,
    assemble_hmm,
    build_local_cell,
    build_stabilization,
    cell_gradient,
    recover_hmm_fluxes,
)
from polyfv.sparse_linalg import is_spd


def unit_square_mesh():
    return build_cartesian(1, 1)


def pentagon_mesh():
    verts = np.array([(0.0, 0.0), (2.0, 0.2), (2.5, 1.4), (1.2, 2.3),
                      (-0.3, 1.1)])
    return Mesh(verts, [(0, 1, 2, 3, 4)])


def edge_values(mesh, cell, fn):
    return np.array([fn(*mesh.edge_midpoints[e])
                     for e in mesh.cell_edges[cell]])


# -------------------------------------------------------------- cell gradient

def test_cell_gradient_unit_square():
    mesh = unit_square_mesh()
    loc = build_local_cell(mesh, 0, np.eye(2))
    u = lambda x, y: x  # noqa: E731
    g = cell_gradient(loc, 0.5, edge_values(mesh, 0, u))
    assert np.allclose(g, [1.0, 0.0], atol=1e-14)


def test_cell_gradient_constant():
    mesh = unit_square_mesh()
    loc = build_local_cell(mesh, 0, np.eye(2))
    g = cell_gradient(loc, 3.5, np.full(4, 3.5))
    assert np.allclose(g, 0.0, atol=1e-14)


def test_cell_gradient_affine_on_pentagon():
    mesh = pentagon_mesh()
    loc = build_local_cell(mesh, 0, np.eye(2))
    u = lambda x, y: 2.0 * x + 3.0 * y  # noqa: E731
    g = cell_gradient(loc, u(*mesh.cell_points[0]),
                      edge_values(mesh, 0, u))
    assert np.abs(g - [2.0, 3.0]).max() < 1e-12


# -------------------------------------------------------------- stabilization

def test_default_stabilization_unit_square():
    mesh = unit_square_mesh()
    b = build_stabilization(mesh, 0, np.eye(2))
    assert np.allclose(b, 2.0 * np.eye(4), atol=1e-14)


def test_default_stabilization_scales_with_trace():
    mesh = unit_square_mesh()
    b = build_stabilization(mesh, 0, np.diag([1e4, 1.0]))
    assert np.allclose(b, (1e4 + 1.0) * np.eye(4), rtol=1e-14)


def test_zero_stabilization_only_on_triangles():
    quad = unit_square_mesh()
    with pytest.raises(SchemeError, match="triangles"):
        build_stabilization(quad, 0, np.eye(2), rule="zero")
    tri = build_triangular(1, 1)
    assert np.allclose(build_stabilization(tri, 0, np.eye(2), rule="zero"),
                       0.0)


def test_unknown_rule_rejected():
    with pytest.raises(SchemeError, match="unknown stabilization"):
        build_stabilization(unit_square_mesh(), 0, np.eye(2), rule="best")


def test_user_matrix_validated():
    mesh = unit_square_mesh()
    good = 3.0 * np.eye(4)
    assert np.allclose(build_stabilization(mesh, 0, np.eye(2), good), good)
    with pytest.raises(SchemeError, match="not symmetric"):
        build_stabilization(mesh, 0, np.eye(2), good + np.triu(np.ones(4), 1))
    with pytest.raises(SchemeError, match="not positive definite"):
        build_stabilization(mesh, 0, np.eye(2), -good)
    with pytest.raises(SchemeError, match="shape"):
        build_stabilization(mesh, 0, np.eye(2), np.eye(3))


# ------------------------------------------------------------ local operators

def test_local_invariants_on_perturbed_mesh():
    mesh = perturb_random(build_cartesian(4, 4), 0.2, seed=5)
    lam = np.array([[2.0, 0.7], [0.7, 1.5]])
    u = lambda x, y: 1.2 * x - 0.4 * y + 0.3  # noqa: E731
    for k in range(mesh.nc):
        loc = build_local_cell(mesh, k, lam)
        u_k = u(*mesh.cell_points[k])
        u_e = edge_values(mesh, k, u)
        assert np.abs(cell_gradient(loc, u_k, u_e)
                      - [1.2, -0.4]).max() < 1e-12
        assert np.abs(loc.stabilization_residual(u_k, u_e)).max() < 1e-12


def test_local_fluxes_exact_on_affine():
    mesh = perturb_random(build_cartesian(3, 3), 0.2, seed=9)
    lam = np.array([[3.0, 1.0], [1.0, 2.0]])
    slope = np.array([1.0, -1.0])
    u = lambda x, y: x - y  # noqa: E731
    for k in range(mesh.nc):
        loc = build_local_cell(mesh, k, lam)
        f = loc.fluxes(u(*mesh.cell_points[k]), edge_values(mesh, k, u))
        exact = np.array([
            -mesh.edge_lengths[e] * (lam @ slope) @ mesh.outward_normal(k, e)
            for e in mesh.cell_edges[k]
        ])
        assert np.abs(f - exact).max() < 1e-11


# ------------------------------------------------------------------- assembly

def test_zero_data_zero_solution():
    mesh = perturb_random(build_cartesian(3, 3), 0.2, seed=1)
    prob = Problem(tensor=TensorField.isotropic(1.0),
                   source=lambda x, y: 0.0,
                   dirichlet=lambda x, y: 0.0)
    sol = assemble_hmm(mesh, prob).solve()
    assert np.allclose(sol.values, 0.0, atol=1e-13)


def test_affine_interpolant_solves_exactly():
    mesh = perturb_random(build_cartesian(4, 4), 0.2, seed=13)
    prob = manufactured_case("affine(1,-1,0)",
                             tensor=np.array([[2.0, 0.5], [0.5, 1.0]]))
    asm = assemble_hmm(mesh, prob)
    interp = asm.interpolate(prob.exact)
    resid = asm.system.matrix @ interp.values - asm.system.rhs
    assert np.abs(resid).max() < 1e-10 * max(asm.system.matrix.max_abs(), 1.0)
    sol = asm.solve()
    assert np.abs(sol.values - interp.values).max() < 1e-9


def test_spd_on_anisotropic_perturbed_mesh():
    mesh = perturb_random(build_cartesian(8, 8), 0.3, seed=4)
    prob = manufactured_case("bubble_aniso(1e4)")
    asm = assemble_hmm(mesh, prob)
    assert asm.system.matrix.is_symmetric(rtol=1e-12)
    assert bool(is_spd(asm.system.matrix))


def test_custom_stabilization_through_assembly():
    # Any symmetric positive definite stabilization keeps affine data
    # exact because the Taylor remainders vanish there.
    mesh = build_cartesian(3, 2)
    prob = manufactured_case("affine(2,1,0)")
    asm = assemble_hmm(mesh, prob, stabilization=lambda k: 3.0 * np.eye(4))
    assert asm.metadata["stabilization"] == "custom"
    interp = asm.interpolate(prob.exact)
    resid = asm.system.matrix @ interp.values - asm.system.rhs
    assert np.abs(resid).max() < 1e-10


def test_zero_stabilization_assembly_fails_spd_check():
    # Cell indicators are gradient-free on triangles without the
    # stabilization term, so the hybrid matrix degenerates; the
    # assembly must refuse to hand back a singular system.
    mesh = build_triangular(2, 2)
    prob = manufactured_case("affine(1,0,0)")
    with pytest.raises(SchemeError, match="internal error"):
        assemble_hmm(mesh, prob, stabilization="zero")


def test_single_pentagon_cell():
    mesh = pentagon_mesh()
    prob = manufactured_case("affine(1,2,-0.5)")
    sol = assemble_hmm(mesh, prob).solve()
    assert sol.get(("cell", 0)) == pytest.approx(
        prob.exact(*mesh.cell_points[0]), abs=1e-10)


# -------------------------------------------------------------- flux recovery

def test_recovered_fluxes_exact_on_affine():
    mesh = perturb_random(build_cartesian(4, 3), 0.15, seed=2)
    lam = np.array([[2.0, 1.0], [1.0, 2.0]])
    prob = manufactured_case("affine(1,2,0)", tensor=lam)
    asm = assemble_hmm(mesh, prob)
    fluxes = recover_hmm_fluxes(asm, asm.solve())
    slope = np.array([1.0, 2.0])
    for (k, e), f in fluxes.items():
        exact = -mesh.edge_lengths[e] * (lam @ slope) @ \
            mesh.outward_normal(k, e)
        assert f == pytest.approx(exact, abs=1e-10)


def test_recovered_fluxes_conservative_and_balanced():
    mesh = perturb_random(build_cartesian(5, 5), 0.2, seed=6)
    prob = manufactured_case("sine_iso")
    asm = assemble_hmm(mesh, prob)
    sol = asm.solve()
    fluxes = recover_hmm_fluxes(asm, sol)
    scale = max(abs(v) for v in fluxes.values())
    for e in mesh.interior_edges:
        k, l = (int(c) for c in mesh.edge_cells[e])
        assert abs(fluxes[(k, int(e))] + fluxes[(l, int(e))]) < 1e-10 * scale
    from polyfv.problem import cell_source_integrals
    src = cell_source_integrals(prob, mesh)
    for k in range(mesh.nc):
        total = sum(fluxes[(k, int(e))] for e in mesh.cell_edges[k])
        assert abs(total - src[k]) < 1e-9 * max(scale, abs(src[k]))


def test_recovered_gradient_identity():
    # The gradient reconstructed from the fluxes equals the direct cell
    # gradient of the unknowns: v_K(W delta) = grad_K u.
    mesh = perturb_random(build_cartesian(4, 4), 0.2, seed=8)
    prob = manufactured_case("sine_iso")
    asm = assemble_hmm(mesh, prob)
    sol = asm.solve()
    for loc in asm.metadata["local_cells"]:
        u_k = sol.get(("cell", loc.cell))
        u_e = np.array([sol.get(("edge", e)) for e in loc.edges])
        f = loc.fluxes(u_k, u_e)
        a_v = -np.linalg.inv(loc.tensor) @ loc.offsets.T / loc.area
        assert np.abs(a_v @ f - cell_gradient(loc, u_k, u_e)).max() < 1e-10


def test_constant_solution_zero_fluxes():
    mesh = build_cartesian(3, 3)
    prob = Problem(tensor=TensorField.isotropic(2.0),
                   source=lambda x, y: 0.0,
                   dirichlet=lambda x, y: 4.0)
    asm = assemble_hmm(mesh, prob)
    fluxes = recover_hmm_fluxes(asm, asm.solve())
    assert max(abs(v) for v in fluxes.values()) < 1e-10


# ------------------------------------------------- inner-product consistency

def test_discrete_stokes_consistency():
    # [interpolated flux, G]_K = sum G_sigma q(midpoint) - (int_K q)
    # times the discrete divergence of G, for affine q and random G.
    mesh = perturb_random(build_cartesian(3, 3), 0.25, seed=12)
    lam = np.array([[2.0, 0.6], [0.6, 1.4]])
    slope = np.array([0.3, -0.7])
    q = lambda x, y: 0.3 * x - 0.7 * y + 0.25  # noqa: E731
    rng = np.random.default_rng(42)
    for k in range(mesh.nc):
        loc = build_local_cell(mesh, k, lam)
        m_inner = np.linalg.inv(loc.flux_matrix)
        f_interp = loc.edge_lengths * (loc.normals @ (lam @ slope))
        mids = mesh.edge_midpoints[list(loc.edges)]
        q_mids = np.array([q(*p) for p in mids])
        q_int = loc.area * q(*mesh.cell_centroids[k])
        for _ in range(20):
            g = rng.standard_normal(len(loc.edges))
            lhs = g @ m_inner @ f_interp
            rhs = g @ q_mids - q_int * g.sum() / loc.area
            assert lhs == pytest.approx(rhs, abs=1e-10)


def test_taylor_property_of_inner_product():
    # Per edge: u_sigma - u_K - v_K(F).(midpoint - x_K) plus the
    # stabilization pairing of the recovery basis with F vanishes.
    mesh = perturb_random(build_cartesian(3, 3), 0.2, seed=21)
    lam = np.array([[1.5, 0.4], [0.4, 1.0]])
    rng = np.random.default_rng(7)
    for k in range(mesh.nc):
        loc = build_local_cell(mesh, k, lam)
        m = len(loc.edges)
        m_inner = np.linalg.inv(loc.flux_matrix)
        a_v = -np.linalg.inv(lam) @ loc.offsets.T / loc.area
        t_op = np.diag(1.0 / loc.edge_lengths) + loc.normals @ lam @ a_v
        r_op = m_inner - loc.area * a_v.T @ lam @ a_v
        t_pinv = np.linalg.pinv(t_op)
        b_op = t_pinv.T @ r_op @ t_pinv + (np.eye(m) - t_op @ t_pinv)
        assert np.abs(t_op.T @ b_op @ t_op - r_op).max() < 1e-10
        for _ in range(2):
            f = rng.standard_normal(m)
            delta = m_inner @ f
            v = a_v @ f
            lhs = -delta - loc.offsets @ v + t_op.T @ b_op @ (t_op @ f)
            assert np.abs(lhs).max() < 1e-10

"""Nonlinear schemes: vertex interpolation, monotone two-point fluxes,
the extremum-preserving multi-point scheme, and the correction wrapper."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polyfv.mesh import build_cartesian, build_triangular, perturb_random
from polyfv.problem import (
    Problem,
    TensorField,
    cell_source_integrals,
    manufactured_case,
)
from polyfv.schemes import (
    SchemeError,
    apply_nonlinear_correction,
    assemble_hmm,
    assemble_tpfa,
    build_vertex_interpolator,
    cone_flux_coefficients,
    frozen_mmp,
    frozen_monotone_polygonal,
    frozen_monotone_triangular,
    mmp_combination_weights,
    solve_nonlinear,
    triangle_flux_coefficients,
)
from polyfv.schemes.nonlinear import FrozenFluxAssembly, _ray_to_edge_line
from polyfv.schemes.base import DofLayout
from polyfv.sparse_linalg import (
    LinearSystem,
    PicardDivergenceError,
    SparseMatrix,
)


def constant_problem(tensor, value=0.0, source=0.0):
    return Problem(
        tensor=tensor,
        source=lambda x, y: source,
        dirichlet=lambda x, y: value,
        name="const",
    )


def max_balance_residual(mesh, problem, fluxes):
    src = cell_source_integrals(problem, mesh)
    return max(
        abs(sum(fluxes[(k, int(e))] for e in mesh.cell_edges[k]) - src[k])
        for k in range(mesh.nc)
    )


def max_conservativity_residual(mesh, fluxes):
    return max(
        (
            abs(fluxes[(int(mesh.edge_cells[e, 0]), int(e))]
                + fluxes[(int(mesh.edge_cells[e, 1]), int(e))])
            for e in mesh.interior_edges
        ),
        default=0.0,
    )


def assert_m_structure(dense, tol):
    off = dense - np.diag(np.diag(dense))
    assert np.diag(dense).min() > 0.0
    assert off.max() <= tol
    # column diagonal dominance (weak everywhere)
    assert dense.sum(axis=0).min() >= -tol


# -------------------------------------------------------- vertex interpolation

def test_vertex_weights_equidistant_quarter():
    mesh = build_cartesian(2, 2)
    interp = build_vertex_interpolator(mesh)
    center = 4  # middle vertex of the 3x3 grid
    pairs = dict(interp.weights[center])
    assert set(pairs) == {0, 1, 2, 3}
    for w in pairs.values():
        assert abs(w - 0.25) < 1e-14


def test_vertex_interpolation_reproduces_constants():
    mesh = perturb_random(build_cartesian(4, 4), 0.2, seed=1)
    interp = build_vertex_interpolator(mesh)
    vals = interp.values(np.full(mesh.nc, 3.25))
    assert np.abs(vals - 3.25).max() < 1e-13


def test_vertex_zone_rule_majority():
    mesh = build_cartesian(2, 2)
    interp = build_vertex_interpolator(mesh, zones=[0, 0, 0, 1])
    pairs = dict(interp.weights[4])
    assert set(pairs) == {0, 1, 2}
    assert abs(sum(pairs.values()) - 1.0) < 1e-14
    assert min(pairs.values()) > 0.0


def test_vertex_zone_tie_prefers_lowest_label():
    mesh = build_cartesian(2, 2)
    interp = build_vertex_interpolator(mesh, zones=[0, 0, 1, 1])
    assert set(dict(interp.weights[4])) == {0, 1}
    assert interp.zones[4] == 0


def test_vertex_weights_are_convex_on_distorted_mesh():
    mesh = perturb_random(build_cartesian(5, 5), 0.25, seed=9)
    interp = build_vertex_interpolator(mesh)
    for pairs in interp.weights:
        weights = [w for _, w in pairs]
        assert min(weights) >= 0.0
        assert abs(sum(weights) - 1.0) < 1e-12


def test_vertex_zones_shape_validated():
    mesh = build_cartesian(2, 2)
    with pytest.raises(SchemeError):
        build_vertex_interpolator(mesh, zones=[0, 1])


# ------------------------------------------------------- triangle plane fluxes

def test_triangle_flux_coefficients_affine_exact():
    rng = np.random.default_rng(4)
    for _ in range(10):
        v = rng.uniform(0, 1, 2)
        x_k = v + rng.uniform(0.2, 1.0, 2) * np.array([1.0, 0.3])
        x_l = v + rng.uniform(0.2, 1.0, 2) * np.array([0.2, 1.0])
        grad = rng.normal(size=2)
        co_normal = rng.normal(size=2)
        length = rng.uniform(0.5, 2.0)
        c_k, c_l, area = triangle_flux_coefficients(
            v, x_k, x_l, co_normal, length, scale=1.0
        )
        u_v, u_k, u_l = (float(grad @ p) for p in (v, x_k, x_l))
        flux = c_k * (u_k - u_v) + c_l * (u_l - u_v)
        assert abs(flux - (-length * co_normal @ grad)) < 1e-12
        assert area > 0.0


def test_triangle_flux_degenerate_rejected():
    with pytest.raises(SchemeError, match="degenerate"):
        triangle_flux_coefficients(
            np.zeros(2), np.array([1.0, 1.0]), np.array([2.0, 2.0]),
            np.array([0.0, 1.0]), 1.0, scale=1.0,
        )


# --------------------------------------------- monotone scheme on triangles

def incenter_mesh(n=4):
    return build_triangular(n, n, cell_point_rule="incenter")


def test_mono_tri_requires_triangles():
    with pytest.raises(SchemeError, match="triangular"):
        frozen_monotone_triangular(
            build_cartesian(2, 2),
            constant_problem(TensorField.constant(np.eye(2))),
        )


def test_mono_tri_requires_identity_tensor():
    with pytest.raises(SchemeError, match="identity"):
        frozen_monotone_triangular(
            incenter_mesh(),
            constant_problem(TensorField.constant(2.0 * np.eye(2))),
        )


def test_mono_tri_incenter_coefficient_signs():
    assembly = frozen_monotone_triangular(
        incenter_mesh(5), constant_problem(TensorField.constant(np.eye(2)))
    )
    for rec in assembly.metadata["interior"]:
        assert rec.ck1 > 0.0 and rec.ck2 > 0.0
        assert rec.cl1 < 0.0 and rec.cl2 < 0.0


def test_mono_tri_constant_state_weights():
    mesh = incenter_mesh(3)
    assembly = frozen_monotone_triangular(
        mesh,
        constant_problem(TensorField.constant(np.eye(2)), value=2.0),
        vertex_values=lambda u: np.full(mesh.nv, 2.0),
    )
    detail = assembly.metadata["frozen_detail"](np.full(mesh.nc, 2.0))
    for rec in assembly.metadata["interior"]:
        mu1, mu2 = detail[rec.e]["mu"]
        inv1, inv2 = 1.0 / rec.area1, 1.0 / rec.area2
        assert abs(mu1 - inv2 / (inv1 + inv2)) < 1e-13
        assert abs(mu2 - inv1 / (inv1 + inv2)) < 1e-13
        assert detail[rec.e]["alpha"] > 0.0
        assert detail[rec.e]["beta"] > 0.0


def test_mono_tri_zero_vertex_values_fall_back_to_half():
    mesh = incenter_mesh(3)
    assembly = frozen_monotone_triangular(
        mesh,
        constant_problem(TensorField.constant(np.eye(2))),
        vertex_values=lambda u: np.zeros(mesh.nv),
    )
    detail = assembly.metadata["frozen_detail"](np.zeros(mesh.nc))
    for info in detail.values():
        assert info["mu"] == (0.5, 0.5)


def test_mono_tri_affine_fixed_point():
    # exact vertex data makes the scheme reproduce affine solutions
    mesh = incenter_mesh(4)
    problem = manufactured_case("affine(2,0.4,1.7)")
    hook = lambda u: np.array(  # noqa: E731
        [problem.exact(*v) for v in mesh.vertices]
    )
    assembly = frozen_monotone_triangular(mesh, problem, vertex_values=hook)
    exact = np.array([problem.exact(*p) for p in mesh.cell_points])
    system = assembly.freeze(exact)
    residual = system.matrix.matvec(exact) - system.rhs
    assert np.abs(residual).max() < 1e-9
    field, report = solve_nonlinear(assembly, tol=1e-12)
    assert np.abs(field.values - exact).max() < 1e-9


def test_mono_tri_positive_data_keeps_iterates_nonnegative():
    mesh = incenter_mesh(5)
    problem = constant_problem(
        TensorField.constant(np.eye(2)), value=0.0, source=2.0
    )
    assembly = frozen_monotone_triangular(mesh, problem)
    seen = []

    def watch(iteration, iterate, system):
        seen.append(iterate.min())
        assert_m_structure(
            system.matrix.to_dense(), 1e-13 * system.matrix.max_abs()
        )

    field, report = solve_nonlinear(assembly, tol=1e-10, callback=watch)
    assert min(seen) >= -1e-10
    assert field.values.min() >= -1e-10
    assert report.iterations == len(seen)


def test_mono_tri_conservative_at_convergence():
    mesh = incenter_mesh(4)
    problem = Problem(
        tensor=TensorField.constant(np.eye(2)),
        source=lambda x, y: 2.0,
        dirichlet=lambda x, y: x * y,
        name="tri-balance",
    )
    assembly = frozen_monotone_triangular(mesh, problem)
    field, _ = solve_nonlinear(assembly, tol=1e-12)
    fluxes = assembly.frozen_fluxes(field.values)
    scale = max(1.0, max(abs(v) for v in fluxes.values()))
    assert max_conservativity_residual(mesh, fluxes) < 1e-9 * scale
    assert max_balance_residual(mesh, problem, fluxes) < 1e-9 * scale


# --------------------------------------------- monotone scheme on polygons

def test_cone_square_cell_right_edge():
    mesh = build_cartesian(1, 1)
    tensors = np.array([np.eye(2)])
    right = [e for e in range(mesh.ne)
             if abs(mesh.edge_midpoints[e][0] - 1.0) < 1e-12][0]
    v1, v2, a, b = cone_flux_coefficients(mesh, tensors, 0, right)
    picked = {tuple(mesh.vertices[v1]), tuple(mesh.vertices[v2])}
    assert picked == {(1.0, 0.0), (1.0, 1.0)}
    assert abs(a - 1.0) < 1e-14
    assert abs(b - 1.0) < 1e-14


def test_cone_failure_names_cell_and_edge():
    # a cell point outside the cell leaves directions spanning less than
    # the full plane, so a co-normal pointing away has no admissible pair
    mesh = build_cartesian(1, 1)
    mesh.cell_points = np.array([[-5.0, 0.5]])
    tensors = np.array([np.eye(2)])
    left = [e for e in range(mesh.ne)
            if abs(mesh.edge_midpoints[e][0]) < 1e-12][0]
    with pytest.raises(SchemeError, match=f"cell 0 .* edge {left}"):
        cone_flux_coefficients(mesh, tensors, 0, left)


def test_cone_decomposition_covers_distorted_anisotropic_mesh():
    mesh = perturb_random(build_cartesian(6, 6), 0.25, seed=2)
    tensors = TensorField.constant(np.diag([1e3, 1.0])).cell_tensors(mesh)
    for e in map(int, mesh.interior_edges):
        for k in map(int, mesh.edge_cells[e]):
            _, _, a, b = cone_flux_coefficients(mesh, tensors, k, e)
            assert a >= 0.0 and b >= 0.0


def test_mono_poly_constant_data_gives_constant_and_zero_flux():
    mesh = perturb_random(build_cartesian(6, 6), 0.2, seed=5)
    problem = constant_problem(
        TensorField.constant(np.diag([1e3, 1.0])), value=3.5
    )
    assembly = frozen_monotone_polygonal(mesh, problem)
    field, report = solve_nonlinear(assembly, tol=1e-10)
    assert np.abs(field.values - 3.5).max() < 1e-12
    assert report.iterations <= 2
    fluxes = assembly.frozen_fluxes(field.values)
    assert max(abs(v) for v in fluxes.values()) < 1e-8


def test_mono_poly_weights_match_vertex_parts():
    mesh = perturb_random(build_cartesian(4, 4), 0.15, seed=3)
    problem = constant_problem(TensorField.constant(np.eye(2)), value=1.0)
    vertex_vals = 0.1 + np.abs(np.sin(1.0 + np.arange(mesh.nv)))
    assembly = frozen_monotone_polygonal(
        mesh, problem, vertex_values=lambda u: vertex_vals
    )
    u = np.ones(mesh.nc)
    detail = assembly.metadata["frozen_detail"](u)
    cones = assembly.metadata["cones"]
    for rec in assembly.metadata["interior"]:
        v1, v2, a_k, b_k = cones[(rec.k, rec.e)]
        v3, v4, a_l, b_l = cones[(rec.l, rec.e)]
        own = a_k * vertex_vals[v1] + b_k * vertex_vals[v2]
        other = a_l * vertex_vals[v3] + b_l * vertex_vals[v4]
        mu1, mu2 = detail[rec.e]["mu"]
        assert abs(mu1 - other / (own + other)) < 1e-12
        assert abs(mu2 - own / (own + other)) < 1e-12


def test_mono_poly_zero_vertex_values_fall_back_to_half():
    mesh = build_cartesian(3, 3)
    problem = constant_problem(TensorField.constant(np.eye(2)))
    assembly = frozen_monotone_polygonal(mesh, problem)
    detail = assembly.metadata["frozen_detail"](np.zeros(mesh.nc))
    for info in detail.values():
        assert info["mu"] == (0.5, 0.5)


def test_mono_poly_affine_fixed_point_anisotropic():
    mesh = perturb_random(build_cartesian(5, 5), 0.2, seed=8)
    tensor = np.array([[2.0, 0.5], [0.5, 1.0]])
    problem = manufactured_case("affine(1,1,3)", tensor=tensor)
    hook = lambda u: np.array(  # noqa: E731
        [problem.exact(*v) for v in mesh.vertices]
    )
    assembly = frozen_monotone_polygonal(mesh, problem, vertex_values=hook)
    exact = np.array([problem.exact(*p) for p in mesh.cell_points])
    system = assembly.freeze(exact)
    assert np.abs(system.matrix.matvec(exact) - system.rhs).max() < 1e-9


def test_mono_poly_anisotropic_positivity():
    mesh = perturb_random(build_cartesian(8, 8), 0.2, seed=5)
    problem = Problem(
        tensor=TensorField.constant(np.diag([1e3, 1.0])),
        source=lambda x, y: 1.0 + 0.3 * np.cos(3 * x) * np.cos(2 * y),
        dirichlet=lambda x, y: 0.2 + 0.1 * x + 0.05 * y,
        name="poly-positivity",
    )
    assembly = frozen_monotone_polygonal(mesh, problem)
    seen = []

    def watch(iteration, iterate, system):
        seen.append(iterate.min())
        assert_m_structure(
            system.matrix.to_dense(), 1e-13 * system.matrix.max_abs()
        )

    field, report = solve_nonlinear(assembly, tol=1e-10, callback=watch)
    assert report.iterations <= 200
    assert min(seen) >= -1e-12
    assert field.values.min() >= -1e-12


def test_mono_poly_conservative_at_convergence():
    mesh = perturb_random(build_cartesian(6, 6), 0.2, seed=5)
    problem = Problem(
        tensor=TensorField.constant(np.diag([1e3, 1.0])),
        source=lambda x, y: 1.0,
        dirichlet=lambda x, y: 0.2 + 0.1 * x,
        name="poly-balance",
    )
    assembly = frozen_monotone_polygonal(mesh, problem)
    field, _ = solve_nonlinear(assembly, tol=1e-13, maxit=400)
    fluxes = assembly.frozen_fluxes(field.values)
    scale = max(1.0, max(abs(v) for v in fluxes.values()))
    assert max_conservativity_residual(mesh, fluxes) < 1e-9 * scale
    assert max_balance_residual(mesh, problem, fluxes) < 1e-9 * scale


# ------------------------------------------ extremum-preserving multi-point

def test_mmp_combination_weights_examples():
    mu1, mu2, th_own, th_other = mmp_combination_weights(1.0, 3.0)
    assert (mu1, mu2) == (0.75, 0.25)
    assert (th_own, th_other) == (1.5, 0.5)
    mu1, mu2, th_own, th_other = mmp_combination_weights(1.0, -3.0)
    assert (mu1, mu2) == (0.75, 0.25)
    assert th_own == th_other == 0.0
    assert mmp_combination_weights(0.0, 0.0) == (0.5, 0.5, 0.0, 0.0)


@given(
    st.floats(min_value=-10, max_value=10,
              allow_nan=False, allow_infinity=False),
    st.floats(min_value=-10, max_value=10,
              allow_nan=False, allow_infinity=False),
)
def test_mmp_combination_weights_property(g1, g2):
    mu1, mu2, th_own, th_other = mmp_combination_weights(g1, g2)
    assert mu1 >= 0.0 and mu2 >= 0.0
    assert abs(mu1 + mu2 - 1.0) < 1e-12
    assert th_own >= 0.0 and th_other >= 0.0
    combined = mu1 * g1 + mu2 * g2
    if g1 * g2 > 0.0:
        assert abs(th_own * g1 - combined) < 1e-12 * (abs(g1) + abs(g2))
        assert abs(th_other * g2 - combined) < 1e-12 * (abs(g1) + abs(g2))
    else:
        assert abs(combined) < 1e-12 * (abs(g1) + abs(g2) + 1e-30)


def test_mmp_matches_tpfa_on_cartesian_isotropic():
    mesh = build_cartesian(4, 3)
    problem = Problem(
        tensor=TensorField.isotropic(2.5),
        source=lambda x, y: 1.0,
        dirichlet=lambda x, y: x + y,
        name="iso",
    )
    reference = assemble_tpfa(mesh, problem)
    assembly = frozen_mmp(mesh, problem)
    u = np.random.default_rng(0).normal(size=mesh.nc)
    system = assembly.freeze(u)
    diff = np.abs(
        system.matrix.to_dense() - reference.system.matrix.to_dense()
    ).max()
    assert diff < 1e-12
    assert np.abs(system.rhs - reference.system.rhs).max() < 1e-12


def test_mmp_rays_hit_neighbors_on_cartesian():
    mesh = build_cartesian(3, 3)
    assembly = frozen_mmp(
        mesh, constant_problem(TensorField.isotropic(1.0))
    )
    for rec in assembly.metadata["edges"]:
        assert rec.side_k.exact_hit and rec.side_l.exact_hit
        assert rec.side_k.support == ((rec.l, 1.0),)
        assert rec.side_l.support == ((rec.k, 1.0),)
        mid = mesh.edge_midpoints[rec.e]
        assert np.linalg.norm(rec.side_k.x1 - mid) < 1e-12


def test_mmp_frozen_rows_stay_monotone_at_random_states():
    mesh = perturb_random(build_cartesian(8, 8), 0.25, seed=11)
    problem = Problem(
        tensor=TensorField.constant(np.diag([50.0, 1.0])),
        source=lambda x, y: 0.0,
        dirichlet=lambda x, y: x + 0.2,
        name="mmp-struct",
    )
    assembly = frozen_mmp(mesh, problem)
    for rec in assembly.metadata["edges"]:
        assert rec.alpha_bar > 0.0
        assert all(b >= 0.0 for b in rec.beta_k.values())
        assert all(b >= 0.0 for b in rec.beta_l.values())
    rng = np.random.default_rng(3)
    for _ in range(5):
        u = rng.uniform(-2.0, 2.0, mesh.nc)
        dense = assembly.freeze(u).matrix.to_dense()
        tol = 1e-13 * np.abs(dense).max()
        off = dense - np.diag(np.diag(dense))
        assert np.diag(dense).min() > 0.0
        assert off.max() <= tol
        assert dense.sum(axis=1).min() >= -tol
        for rec in assembly.metadata["edges"]:
            # coupling toward the cross neighbor never drops below the
            # shared two-point coefficient
            assert -dense[rec.k, rec.l] >= rec.alpha_bar - tol
            assert -dense[rec.l, rec.k] >= rec.alpha_bar - tol


def test_mmp_interior_rows_without_boundary_couplings_sum_to_zero():
    mesh = build_cartesian(5, 5)
    assembly = frozen_mmp(
        mesh,
        Problem(tensor=TensorField.isotropic(2.0),
                source=lambda x, y: 0.0,
                dirichlet=lambda x, y: x,
                name="rowsum"),
    )
    u = np.random.default_rng(7).normal(size=mesh.nc)
    dense = assembly.freeze(u).matrix.to_dense()
    boundary_cells = {
        int(mesh.edge_cells[e, 0]) for e in mesh.boundary_edges
    }
    interior = [k for k in range(mesh.nc) if k not in boundary_cells]
    assert interior
    sums = dense[interior].sum(axis=1)
    assert np.abs(sums).max() < 1e-12 * np.abs(dense).max()


def test_mmp_preserves_boundary_range_on_distorted_anisotropic_mesh():
    mesh = perturb_random(build_cartesian(16, 16), 0.3, seed=7)
    problem = Problem(
        tensor=TensorField.constant(np.diag([1e3, 1.0])),
        source=lambda x, y: 0.0,
        dirichlet=lambda x, y: x,
        name="mmp-range",
    )
    assembly = frozen_mmp(mesh, problem)
    field, report = solve_nonlinear(assembly, tol=1e-8, maxit=200)
    assert report.iterations <= 200
    assert field.values.min() >= -1e-10
    assert field.values.max() <= 1.0 + 1e-10


def test_mmp_boundary_anchor_keeps_cross_neighbor_positive():
    # strong anisotropy near the boundary sends some rays out of the
    # mesh; those sides anchor at a Dirichlet point but must keep a
    # strictly positive coupling toward the cross-edge neighbor
    mesh = perturb_random(build_cartesian(16, 16), 0.3, seed=7)
    problem = Problem(
        tensor=TensorField.constant(np.diag([1e3, 1.0])),
        source=lambda x, y: 0.0,
        dirichlet=lambda x, y: x,
        name="mmp-anchor",
    )
    assembly = frozen_mmp(mesh, problem)
    anchored = [r for r in assembly.metadata["edges"]
                if r.fixed_k or r.fixed_l]
    assert anchored
    for rec in anchored:
        assert rec.alpha_bar > 0.0
        for val, coeff in rec.fixed_k + rec.fixed_l:
            assert coeff >= 0.0
            assert -1e-12 <= val <= 1.0 + 1e-12


def test_mmp_constant_boundary_solved_in_one_iteration():
    mesh = perturb_random(build_cartesian(8, 8), 0.2, seed=4)
    problem = constant_problem(
        TensorField.constant(np.diag([1e3, 1.0])), value=5.0
    )
    assembly = frozen_mmp(mesh, problem)
    field, report = solve_nonlinear(assembly, tol=1e-10)
    assert report.iterations == 1
    assert np.abs(field.values - 5.0).max() < 1e-10


def test_mmp_conservative_at_convergence():
    mesh = perturb_random(build_cartesian(8, 8), 0.25, seed=11)
    problem = Problem(
        tensor=TensorField.constant(np.diag([50.0, 1.0])),
        source=lambda x, y: 0.0,
        dirichlet=lambda x, y: x + 0.2,
        name="mmp-balance",
    )
    assembly = frozen_mmp(mesh, problem)
    field, _ = solve_nonlinear(assembly, tol=1e-12, maxit=300)
    fluxes = assembly.frozen_fluxes(field.values)
    scale = max(1.0, max(abs(v) for v in fluxes.values()))
    assert max_conservativity_residual(mesh, fluxes) < 1e-9 * scale
    assert max_balance_residual(mesh, problem, fluxes) < 1e-9 * scale


def test_ray_intersection_rejects_parallel_and_backward():
    mesh = build_cartesian(2, 1)
    edge = int(mesh.boundary_edges[0])
    a = mesh.vertices[mesh.edge_vertices[edge, 0]]
    b = mesh.vertices[mesh.edge_vertices[edge, 1]]
    along = b - a
    normal = np.array([-along[1], along[0]])
    normal /= np.linalg.norm(normal)
    with pytest.raises(SchemeError, match="parallel"):
        _ray_to_edge_line(mesh, 0.5 * (a + b) + normal, along, edge, "test")
    # start off the line and march further away from it
    with pytest.raises(SchemeError, match="points away"):
        _ray_to_edge_line(mesh, 0.5 * (a + b) + normal, normal, edge, "test")


# ----------------------------------------------------- nonlinear correction

def test_correction_vanishes_at_matching_constant_state():
    mesh = build_cartesian(4, 4)
    problem = constant_problem(TensorField.isotropic(1.0), value=4.0)
    corrected = apply_nonlinear_correction("tpfa", mesh, problem)
    u = np.full(mesh.nc, 4.0)
    detail = corrected.metadata["frozen_detail"](u)
    assert np.all(detail["lb"] == 0.0)
    eps = detail["epsilon"]
    assert all(abs(b - eps) < 1e-30 for b in detail["beta"].values())
    system = corrected.freeze(u)
    assert np.abs(system.matrix.matvec(u) - system.rhs).max() < 1e-12
    field, report = solve_nonlinear(corrected, tol=1e-10)
    assert report.iterations == 1
    assert np.abs(field.values - 4.0).max() < 1e-12


def test_correction_is_symmetric_and_nonnegative_quadratic():
    mesh = perturb_random(build_cartesian(6, 6), 0.2, seed=2)
    problem = manufactured_case("bubble_aniso(100)")
    corrected = apply_nonlinear_correction("hmm", mesh, problem)
    rng = np.random.default_rng(1)
    u = rng.normal(size=mesh.nc)
    delta = (
        corrected.freeze(u).matrix.to_dense()
        - corrected.metadata["base_matrix"].to_dense()
    )
    assert np.abs(delta - delta.T).max() < 1e-12 * np.abs(delta).max()
    detail = corrected.metadata["frozen_detail"](u)
    x = rng.normal(size=mesh.nc)
    manual = sum(
        b * (x[int(mesh.edge_cells[e, 0])]
             - x[int(mesh.edge_cells[e, 1])]) ** 2
        for e, b in detail["beta"].items()
    )
    manual += sum(
        b * x[int(mesh.edge_cells[e, 0])] ** 2
        for e, b in detail["beta_boundary"].items()
    )
    quad = x @ delta @ x
    assert quad >= 0.0
    assert abs(quad - manual) < 1e-9 * max(1.0, abs(manual))


def test_corrected_tpfa_converges_from_base_solution():
    mesh = build_cartesian(6, 6)
    problem = manufactured_case("affine(2,-3,1)")
    corrected = apply_nonlinear_correction("tpfa", mesh, problem)
    base = assemble_tpfa(mesh, problem).solve().cell_values(mesh)
    field, report = solve_nonlinear(corrected, u0=base, tol=1e-8)
    assert report.iterations <= 2
    assert np.abs(field.values - base).max() < 1e-8


def test_corrected_hmm_restores_minimum_principle():
    # strongly anisotropic source-driven case where the plain hybrid
    # scheme undershoots zero on a distorted mesh
    mesh = perturb_random(build_cartesian(16, 16), 0.3, seed=7)
    problem = manufactured_case("bubble_aniso(1e4)")
    plain = assemble_hmm(mesh, problem).solve().cell_values(mesh)
    assert plain.min() < 0.0
    corrected = apply_nonlinear_correction("hmm", mesh, problem)
    field, report = solve_nonlinear(corrected, tol=1e-12, maxit=300)
    assert field.values.min() >= -1e-10
    assert report.converged


def test_corrected_fluxes_balance_sources():
    mesh = build_cartesian(5, 5)
    problem = manufactured_case("bubble_iso")
    corrected = apply_nonlinear_correction("tpfa", mesh, problem)
    field, _ = solve_nonlinear(corrected, tol=1e-12)
    fluxes = corrected.frozen_fluxes(field.values)
    scale = max(1.0, max(abs(v) for v in fluxes.values()))
    assert max_conservativity_residual(mesh, fluxes) < 1e-9 * scale
    assert max_balance_residual(mesh, problem, fluxes) < 1e-9 * scale


def test_correction_rejects_unknown_base():
    mesh = build_cartesian(2, 2)
    problem = constant_problem(TensorField.isotropic(1.0))
    with pytest.raises(SchemeError, match="unknown base"):
        apply_nonlinear_correction("mystery", mesh, problem)


def test_correction_rejects_hybrid_callable():
    mesh = build_cartesian(3, 3)
    problem = constant_problem(TensorField.isotropic(1.0))
    with pytest.raises(SchemeError, match="cell-centred"):
        apply_nonlinear_correction(assemble_hmm, mesh, problem)


def test_correction_rejects_asymmetric_stencil():
    mesh = build_cartesian(3, 3)
    problem = constant_problem(TensorField.isotropic(1.0))

    def lopsided(mesh, problem):
        assembled = assemble_tpfa(mesh, problem)
        dense = assembled.system.matrix.to_dense()
        dense[0, 1] = 0.0  # break the coupling pattern one-sidedly
        assembled.system.matrix = SparseMatrix.from_dense(dense)
        return assembled

    with pytest.raises(SchemeError, match="not symmetric"):
        apply_nonlinear_correction(lopsided, mesh, problem)


# ------------------------------------------------------------- solve driver

def toy_assembly(freeze, n=1, boundary=None):
    layout = DofLayout(
        free_ids=[("cell", i) for i in range(n)], boundary_ids=[]
    )
    return FrozenFluxAssembly(
        scheme="toy",
        mesh=None,
        layout=layout,
        boundary_values=boundary or {},
        freeze=freeze,
        frozen_fluxes=lambda u: {},
    )


def test_solve_nonlinear_default_start_is_boundary_midpoint():
    starts = []

    def freeze(u):
        starts.append(np.array(u))
        return LinearSystem(
            SparseMatrix.from_dense(np.eye(1)), np.array([0.25])
        )

    assembly = toy_assembly(
        freeze, boundary={("edge", 0): 0.0, ("edge", 1): 1.0}
    )
    solve_nonlinear(assembly, tol=1e-12)
    assert abs(starts[0][0] - 0.5) < 1e-15


def test_solve_nonlinear_divergence_carries_increments():
    def flipper(u):
        # fixed point oscillates between +5 and -5 and never settles
        target = -5.0 if u[0] > 0 else 5.0
        return LinearSystem(
            SparseMatrix.from_dense(np.eye(1)), np.array([target])
        )

    assembly = toy_assembly(flipper)
    with pytest.raises(PicardDivergenceError) as err:
        solve_nonlinear(assembly, u0=np.array([5.0]), tol=1e-10, maxit=6)
    assert len(err.value.increments) == 6


def test_solve_nonlinear_reports_iteration_count():
    mesh = build_cartesian(3, 3)
    problem = constant_problem(TensorField.isotropic(1.0), value=1.0)
    assembly = frozen_mmp(mesh, problem)
    field, report = solve_nonlinear(assembly, tol=1e-10, maxit=50)
    assert report.converged
    assert report.iterations <= 50
    assert len(report.increments) == report.iterations

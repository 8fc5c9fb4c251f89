"""Tensor fields, manufactured cases, boundary and source discretization."""

import numpy as np
import pytest

from polyfv.mesh import build_cartesian
from polyfv.problem import (
    Problem,
    ProblemError,
    TensorField,
    cell_source_integrals,
    discretize_boundary,
    manufactured_case,
    residual_check,
    rotational_tensor,
)


# -------------------------------------------------------- rotational tensor

def test_rotational_tensor_axis_points():
    assert np.allclose(rotational_tensor(1.0, 0.0, 1e-3),
                       np.diag([1e-3, 1.0]), atol=1e-15)
    assert np.allclose(rotational_tensor(0.0, 1.0, 1e-3),
                       np.diag([1.0, 1e-3]), atol=1e-15)


def test_rotational_tensor_eigenvalues_everywhere():
    rng = np.random.default_rng(1)
    for _ in range(25):
        x, y = rng.uniform(-2, 2, 2)
        if abs(x) + abs(y) < 1e-3:
            continue
        lam = rotational_tensor(x, y, 1e-3)
        assert np.allclose(lam, lam.T, atol=1e-15)
        eig = np.sort(np.linalg.eigvalsh(lam))
        assert np.allclose(eig, [1e-3, 1.0], atol=1e-12)


def test_rotational_tensor_origin_regularized():
    lam = rotational_tensor(0.0, 0.0, 1e-3)
    eig = np.sort(np.linalg.eigvalsh(lam))
    assert np.all(np.isfinite(lam))
    assert np.allclose(eig, [1e-3, 1.0], atol=1e-9)


def test_rotational_tensor_rejects_bad_delta():
    with pytest.raises(ProblemError):
        rotational_tensor(1.0, 1.0, 0.0)


# -------------------------------------------------------- manufactured cases

def test_affine_case_zero_source():
    case = manufactured_case("affine(2,1,0)")
    assert case.source(0.3, 0.9) == 0.0
    assert case.exact(0.25, 0.5) == pytest.approx(1.0)
    assert np.allclose(case.exact_grad(0.1, 0.2), [2.0, 1.0])


def test_sine_case_source_value():
    case = manufactured_case("sine_iso")
    assert case.source(0.5, 0.5) == pytest.approx(2.0 * np.pi ** 2)
    assert case.exact(0.5, 0.5) == pytest.approx(1.0)


def test_bubble_aniso_boundary_trace_zero():
    case = manufactured_case("bubble_aniso(1e4)")
    for x, y in [(0, 0.3), (1, 0.7), (0.2, 0), (0.9, 1)]:
        assert case.dirichlet(x, y) == pytest.approx(0.0, abs=1e-15)
    # spot value of the closed-form source
    assert case.source(0.5, 0.5) == pytest.approx(5000.5)


def test_bubble_iso_source():
    case = manufactured_case("bubble_iso")
    # f = 2 y(1-y) + 2 x(1-x)
    assert case.source(0.5, 0.5) == pytest.approx(1.0)


def test_all_closed_form_cases_pass_residual_check():
    for name in ("affine(1,-2,3)", "bubble_iso", "bubble_aniso(1000)",
                 "sine_iso"):
        case = manufactured_case(name)
        assert residual_check(case, n_points=100, seed=7) < 1e-8


def test_affine_case_with_constant_tensor():
    case = manufactured_case("affine", a=1.0, b=2.0, c=0.5,
                             tensor=np.array([[3.0, 1.0], [1.0, 2.0]]))
    assert residual_check(case) < 1e-12
    assert np.allclose(case.tensor(0.4, 0.6), [[3, 1], [1, 2]])


def test_indicator_transient_case():
    case = manufactured_case("indicator_transient")
    assert case.initial(0.5, 0.5) == 1.0
    assert case.initial(0.1, 0.1) == 0.0
    assert case.initial(0.25, 0.5) == 0.0  # boundary of the box excluded
    assert case.dirichlet(0.0, 0.4) == 0.0
    eig = np.sort(np.linalg.eigvalsh(case.tensor(0.3, 0.8)))
    assert np.allclose(eig, [1e-3, 1.0], atol=1e-12)


def test_unknown_case_rejected():
    with pytest.raises(ProblemError):
        manufactured_case("mystery_case")
    with pytest.raises(ProblemError):
        manufactured_case("sine_iso", ratio=2.0)


# ------------------------------------------------------------- tensor field

def test_cell_tensors_point_rule():
    mesh = build_cartesian(2, 2)
    lam = TensorField(lambda x, y: np.array([[1.0 + x, 0.0], [0.0, 1.0]]))
    tensors = lam.cell_tensors(mesh)
    assert tensors.shape == (4, 2, 2)
    assert tensors[0, 0, 0] == pytest.approx(1.25)  # x_K = 0.25


def test_cell_tensors_average_rule_differs():
    mesh = build_cartesian(2, 2)
    fn = lambda x, y: rotational_tensor(x, y, 1e-3)
    point = TensorField(fn).cell_tensors(mesh)
    avg = TensorField(fn, mode="average").cell_tensors(mesh)
    assert not np.allclose(point, avg, atol=1e-6)
    assert np.linalg.eigvalsh(avg).min() > 0


def test_non_spd_tensor_rejected():
    mesh = build_cartesian(1, 1)
    lam = TensorField.constant(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ProblemError):
        lam.cell_tensors(mesh)


def test_zone_labels():
    mesh = build_cartesian(2, 1, domain=(0, 0, 2, 1))
    lam = TensorField(
        lambda x, y: np.eye(2), zone_fn=lambda x, y: 0 if x < 1 else 1
    )
    assert list(lam.cell_zones(mesh)) == [0, 1]
    assert list(TensorField.isotropic(2.0).cell_zones(mesh)) == [0, 0]


# ------------------------------------------------- boundary / source values

def test_discretize_boundary_zero():
    mesh = build_cartesian(3, 3)
    case = manufactured_case("bubble_iso")
    bd = discretize_boundary(case, mesh)
    assert np.allclose(bd.edge_values[mesh.boundary_edges], 0.0, atol=1e-15)
    bverts = np.flatnonzero(mesh.vertex_is_boundary)
    assert np.allclose(bd.vertex_values[bverts], 0.0, atol=1e-15)
    assert np.all(np.isnan(bd.edge_values[mesh.interior_edges]))


def test_discretize_boundary_linear_and_quadratic():
    mesh = build_cartesian(1, 1)
    bottom = next(
        e for e in mesh.boundary_edges
        if np.allclose(mesh.edge_midpoints[e], [0.5, 0.0])
    )
    linear = Problem(tensor=TensorField.isotropic(1.0),
                     source=None, dirichlet=lambda x, y: x)
    bd = discretize_boundary(linear, mesh)
    assert bd.edge(bottom) == pytest.approx(0.5, abs=1e-14)

    quad = Problem(tensor=TensorField.isotropic(1.0),
                   source=None, dirichlet=lambda x, y: x * x)
    bd = discretize_boundary(quad, mesh)
    # 2-point Gauss integrates x^2 exactly: mean 1/3
    assert bd.edge(bottom) == pytest.approx(1.0 / 3.0, abs=1e-14)


def test_boundary_vertex_values_are_traces():
    mesh = build_cartesian(2, 2)
    prob = Problem(tensor=TensorField.isotropic(1.0), source=None,
                   dirichlet=lambda x, y: x + 10 * y)
    bd = discretize_boundary(prob, mesh)
    for v in np.flatnonzero(mesh.vertex_is_boundary):
        x, y = mesh.vertices[v]
        assert bd.vertex_values[v] == pytest.approx(x + 10 * y)


def test_cell_source_integrals_affine_exact():
    mesh = build_cartesian(1, 1)
    prob = Problem(tensor=TensorField.isotropic(1.0),
                   source=lambda x, y: x + y, dirichlet=lambda x, y: 0.0)
    vals = cell_source_integrals(prob, mesh)
    # integral of x + y over the unit square is exactly 1
    assert vals[0] == pytest.approx(1.0, abs=1e-14)


def test_cell_source_integrals_none():
    mesh = build_cartesian(2, 2)
    prob = Problem(tensor=TensorField.isotropic(1.0), source=None,
                   dirichlet=lambda x, y: 0.0)
    assert np.allclose(cell_source_integrals(prob, mesh), 0.0)

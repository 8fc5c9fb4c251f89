"""Diffusion problem data: tensors, sources, Dirichlet data, test cases.

A Problem bundles a symmetric positive-definite tensor field, a scalar
source, and Dirichlet boundary data. Manufactured cases add a closed-form
exact solution and the matching source so schemes can be checked for
exactness and convergence orders. All named constructors self-check the
PDE residual -div(Lambda grad u) = f at random interior points using
complex-step derivatives of the analytic flux (machine-accurate, no
finite-difference tuning).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .mesh import polygon_area

GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class ProblemError(Exception):
    """Raised for invalid problem data or unknown case names."""


class TensorField:
    """Symmetric 2x2 tensor field with per-cell representatives.

    `fn(x, y)` returns the 2x2 matrix at a point. The per-cell value is
    the tensor at the cell point by default; mode="average" integrates it
    with a sub-triangle midpoint rule instead (useful for strongly varying
    fields). `zone_fn(x, y)` optionally labels smoothness zones; the label
    is evaluated at cell points and guides interpolation across
    discontinuities.
    """

    def __init__(self, fn, mode="point", zone_fn=None):
        if mode not in ("point", "average"):
            raise ProblemError(f"unknown tensor mode: {mode!r}")
        self.fn = fn
        self.mode = mode
        self.zone_fn = zone_fn

    @classmethod
    def constant(cls, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (2, 2) or not np.allclose(matrix, matrix.T):
            raise ProblemError("constant tensor must be symmetric 2x2")
        return cls(lambda x, y: matrix)

    @classmethod
    def isotropic(cls, value):
        if value <= 0:
            raise ProblemError("isotropic coefficient must be positive")
        return cls.constant(value * np.eye(2))

    def __call__(self, x, y):
        return np.asarray(self.fn(x, y))

    def cell_tensors(self, mesh):
        """Per-cell representative tensors, validated SPD."""
        out = np.empty((mesh.nc, 2, 2))
        for k in range(mesh.nc):
            if self.mode == "point":
                out[k] = self(*mesh.cell_points[k])
            else:
                out[k] = self._cell_average(mesh, k)
        sym_err = np.abs(out - out.transpose(0, 2, 1)).max()
        if sym_err > 1e-12 * max(np.abs(out).max(), 1.0):
            raise ProblemError("tensor field is not symmetric")
        eigs = np.linalg.eigvalsh(out)
        if eigs.min() <= 0.0:
            k = int(np.argmin(eigs.min(axis=1)))
            raise ProblemError(f"tensor not positive definite in cell {k}")
        return out

    def _cell_average(self, mesh, k):
        loop = mesh.cells[k]
        c = mesh.cell_centroids[k]
        acc = np.zeros((2, 2))
        area = 0.0
        pts = mesh.vertices[list(loop)]
        for i in range(len(pts)):
            a, b = pts[i], pts[(i + 1) % len(pts)]
            t_area = abs(polygon_area([c, a, b]))
            mid = (a + b + c) / 3.0
            acc += t_area * self(*mid)
            area += t_area
        return acc / area

    def cell_zones(self, mesh):
        """Per-cell smoothness-zone labels (all zero without zone_fn)."""
        if self.zone_fn is None:
            return np.zeros(mesh.nc, dtype=int)
        return np.array(
            [int(self.zone_fn(*p)) for p in mesh.cell_points], dtype=int
        )


def rotational_tensor(x, y, delta):
    """Anisotropic tensor with radial eigenvalue delta and tangential 1.

    Entries [[delta x^2 + y^2, (delta-1) x y], [(delta-1) x y,
    x^2 + delta y^2]] / (x^2 + y^2). The origin is evaluated at a
    1e-12-shifted point. Accepts complex coordinates (used by the
    complex-step residual check).
    """
    if delta <= 0:
        raise ProblemError("delta must be positive")
    r2 = x * x + y * y
    if not np.iscomplexobj(np.asarray(r2)) and abs(r2) < 1e-300:
        x, y = 1e-12, 1e-12
        r2 = x * x + y * y
    a = (delta * x * x + y * y) / r2
    b = (delta - 1.0) * x * y / r2
    c = (x * x + delta * y * y) / r2
    return np.array([[a, b], [b, c]])


@dataclass
class Problem:
    """Dirichlet diffusion problem on the unit square (or any mesh domain).

    tensor: TensorField; source: f(x, y); dirichlet: u_b(x, y).
    exact / exact_grad are optional closed-form references.
    """

    tensor: TensorField
    source: object
    dirichlet: object
    exact: object = None
    exact_grad: object = None
    name: str = "problem"
    initial: object = None  # transient initial datum u0(x, y)

    def exact_flux(self, x, y):
        """Analytic flux Lambda(x, y) grad u(x, y); needs exact_grad."""
        if self.exact_grad is None:
            raise ProblemError(f"case {self.name!r} has no exact gradient")
        return self.tensor(x, y) @ np.asarray(self.exact_grad(x, y))


@dataclass
class BoundaryData:
    """Discretized Dirichlet data: per-boundary-edge and per-vertex values.

    Arrays hold NaN on interior entries so misuse shows up immediately.
    """

    edge_values: np.ndarray
    vertex_values: np.ndarray

    def edge(self, e):
        v = self.edge_values[e]
        if np.isnan(v):
            raise ProblemError(f"edge {e} carries no boundary value")
        return float(v)

    def vertex(self, v):
        val = self.vertex_values[v]
        if np.isnan(val):
            raise ProblemError(f"vertex {v} carries no boundary value")
        return float(val)


def discretize_boundary(problem, mesh):
    """Edge means (2-point Gauss) and vertex traces of the Dirichlet data."""
    edge_values = np.full(mesh.ne, np.nan)
    vertex_values = np.full(mesh.nv, np.nan)
    ub = problem.dirichlet
    for e in mesh.boundary_edges:
        a = mesh.vertices[mesh.edge_vertices[e, 0]]
        b = mesh.vertices[mesh.edge_vertices[e, 1]]
        vals = [ub(*(a + t * (b - a))) for t in GAUSS2]
        edge_values[e] = 0.5 * (vals[0] + vals[1])
    for v in np.flatnonzero(mesh.vertex_is_boundary):
        vertex_values[v] = ub(*mesh.vertices[v])
    return BoundaryData(edge_values=edge_values, vertex_values=vertex_values)


def cell_source_integrals(problem, mesh):
    """Integrals of the source over each cell (sub-triangle midpoint rule).

    Each cell is fanned into triangles from its centroid; the rule uses
    the value at each triangle's centroid, exact for affine integrands.
    """
    f = problem.source
    out = np.zeros(mesh.nc)
    if f is None:
        return out
    for k, loop in enumerate(mesh.cells):
        pts = mesh.vertices[list(loop)]
        c = mesh.cell_centroids[k]
        total = 0.0
        for i in range(len(pts)):
            a, b = pts[i], pts[(i + 1) % len(pts)]
            t_area = abs(polygon_area([c, a, b]))
            mid = (a + b + c) / 3.0
            total += t_area * f(*mid)
        out[k] = total
    return out


def cell_source_averages(problem, mesh):
    """Cell averages of the source, integral / area."""
    return cell_source_integrals(problem, mesh) / mesh.cell_areas


def dual_source_integrals(problem, mesh, dual_polygons):
    """Integrals of the source over given polygons (same midpoint rule).

    dual_polygons maps an id to an (n, 2) vertex array; the fan apex is
    the polygon's first vertex.
    """
    f = problem.source
    out = {}
    for key, pts in dual_polygons.items():
        if f is None:
            out[key] = 0.0
            continue
        apex = pts[0]
        total = 0.0
        for i in range(1, len(pts) - 1):
            a, b = pts[i], pts[i + 1]
            t_area = abs(polygon_area([apex, a, b]))
            mid = (apex + a + b) / 3.0
            total += t_area * f(*mid)
        out[key] = total
    return out


# -- manufactured cases -------------------------------------------------------


def residual_check(problem, n_points=100, seed=0, tol=1e-8):
    """Max |-div(Lambda grad u) - f| at random interior points.

    Divergence via complex-step differentiation of the analytic flux:
    d/dx g(x) = Im g(x + i h) / h exactly to machine precision for
    analytic g, so no step-size tuning is involved.
    """
    if problem.exact_grad is None or problem.source is None:
        raise ProblemError("residual check needs exact_grad and source")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.05, 0.95, size=(n_points, 2))
    h = 1e-200
    worst = 0.0
    for x, y in pts:
        fx = problem.exact_flux(x + 1j * h, y)[0].imag / h
        fy = problem.exact_flux(x, y + 1j * h)[1].imag / h
        res = abs(-(fx + fy) - problem.source(x, y))
        worst = max(worst, res)
    if worst > tol:
        raise ProblemError(
            f"case {problem.name!r} fails its PDE residual check: {worst:.3e}"
        )
    return worst


def _affine_case(a, b, c, tensor=None):
    lam = TensorField.constant(np.eye(2) if tensor is None else tensor)

    def u(x, y):
        return a * x + b * y + c

    return Problem(
        tensor=lam,
        source=lambda x, y: 0.0,
        dirichlet=u,
        exact=u,
        exact_grad=lambda x, y: np.array([a + 0.0 * x, b + 0.0 * y]),
        name=f"affine({a},{b},{c})",
    )


def _bubble_case(ratio):
    lam = TensorField.constant(np.diag([float(ratio), 1.0]))

    def u(x, y):
        return x * (1.0 - x) * y * (1.0 - y)

    def grad(x, y):
        return np.array([
            (1.0 - 2.0 * x) * y * (1.0 - y),
            x * (1.0 - x) * (1.0 - 2.0 * y),
        ])

    def f(x, y):
        return 2.0 * ratio * y * (1.0 - y) + 2.0 * x * (1.0 - x)

    name = "bubble_iso" if ratio == 1.0 else f"bubble_aniso({ratio:g})"
    return Problem(tensor=lam, source=f, dirichlet=u, exact=u,
                   exact_grad=grad, name=name)


def _sine_case():
    lam = TensorField.constant(np.eye(2))

    def u(x, y):
        return np.sin(np.pi * x) * np.sin(np.pi * y)

    def grad(x, y):
        return np.array([
            np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
            np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
        ])

    def f(x, y):
        return 2.0 * np.pi ** 2 * u(x, y)

    return Problem(tensor=lam, source=f, dirichlet=u, exact=u,
                   exact_grad=grad, name="sine_iso")


def _indicator_transient_case(delta=1e-3):
    lam = TensorField(lambda x, y: rotational_tensor(x, y, delta))

    def u0(x, y):
        return 1.0 if (0.25 < x < 0.75 and 0.25 < y < 0.75) else 0.0

    return Problem(
        tensor=lam,
        source=lambda x, y: 0.0,
        dirichlet=lambda x, y: 0.0,
        initial=u0,
        name=f"indicator_transient({delta:g})",
    )


_CASE_PATTERN = re.compile(r"^([a-z_]+)(?:\(([^)]*)\))?$")


def manufactured_case(name, **kwargs):
    """Build a named test case; parameters inline ("affine(2,1,0)") or as
    keyword arguments. Known names: affine(a,b,c), bubble_iso,
    bubble_aniso(ratio), sine_iso, indicator_transient.
    """
    m = _CASE_PATTERN.match(name.strip())
    if not m:
        raise ProblemError(f"malformed case name: {name!r}")
    base, argstr = m.group(1), m.group(2)
    args = []
    if argstr:
        args = [float(tok) for tok in argstr.split(",") if tok.strip()]
    if base == "affine":
        a, b, c = (args + [1.0, 0.0, 0.0])[:3] if args else (
            kwargs.pop("a", 1.0), kwargs.pop("b", 0.0), kwargs.pop("c", 0.0))
        case = _affine_case(a, b, c, tensor=kwargs.pop("tensor", None))
    elif base == "bubble_iso":
        case = _bubble_case(1.0)
    elif base == "bubble_aniso":
        ratio = args[0] if args else kwargs.pop("ratio", 1e3)
        case = _bubble_case(float(ratio))
    elif base == "sine_iso":
        case = _sine_case()
    elif base == "indicator_transient":
        delta = args[0] if args else kwargs.pop("delta", 1e-3)
        case = _indicator_transient_case(float(delta))
    else:
        raise ProblemError(f"unknown case name: {name!r}")
    if kwargs:
        raise ProblemError(f"unused case parameters: {sorted(kwargs)}")
    if case.exact_grad is not None:
        residual_check(case)
    return case

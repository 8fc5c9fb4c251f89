"""Structural verdicts on assembled schemes and solved fields.

Every notion the schemes advertise (M-matrix shape, coercivity through
the smallest eigenvalue, two-point transmissibility structure, local
conservation, discrete maximum principles, exactness on affine data,
and refinement orders) is expressed here as an executable check with an
explicit witness, so a failing property always points at a concrete
matrix entry, cell, or residual.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .problem import cell_source_integrals
from .schemes.base import AssembledSystem, SolutionField, recover_fluxes
from .schemes.nonlinear import FrozenFluxAssembly, solve_nonlinear
from .sparse_linalg import SparseMatrix

log = logging.getLogger(__name__)

# tolerances, all relative to the largest matrix entry or data scale
POSITIVE_OFFDIAG_RTOL = 1e-13
SYMMETRY_RTOL = 1e-12
ROW_SUM_RTOL = 1e-12
EIGENVALUE_RTOL = 1e-8
POSITIVE_EIG_RTOL = 1e-12
FLUX_LAW_RTOL = 1e-9
EXACTNESS_RTOL = 1e-9
MINMAX_RTOL = 1e-10
ROUNDING_ERROR_RTOL = 1e-12


class DiagnosticsError(Exception):
    """A diagnostic was invoked on data it cannot judge."""


def _as_dense(matrix):
    if isinstance(matrix, SparseMatrix):
        return matrix.to_dense()
    dense = np.asarray(matrix, dtype=float)
    if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
        raise DiagnosticsError("diagnostics expect a square matrix")
    return dense


# --------------------------------------------------------------------------
# matrix shape checks


@dataclass
class MMatrixCheck:
    """Sign/dominance/connectivity verdict with the first violation."""

    ok: bool
    violation: str = None


def check_m_matrix(matrix):
    """Check the discrete-minimum-principle matrix shape.

    Requires strictly positive diagonal, nonpositive off-diagonal
    entries, weak diagonal dominance by columns with at least one
    strictly dominant column, and a connected coupling graph.
    """
    dense = _as_dense(matrix)
    n = dense.shape[0]
    scale = max(np.abs(dense).max(), 1e-300)
    tol = POSITIVE_OFFDIAG_RTOL * scale
    diag = np.diag(dense)
    if diag.min() <= 0.0:
        i = int(np.argmin(diag))
        return MMatrixCheck(False, f"nonpositive diagonal {diag[i]:.3e} "
                                   f"at row {i}")
    off = dense - np.diag(diag)
    if off.max() > tol:
        i, j = np.unravel_index(np.argmax(off), off.shape)
        return MMatrixCheck(False, f"positive off-diagonal "
                                   f"{off[i, j]:.3e} at ({i}, {j})")
    col_sums = dense.sum(axis=0)
    if col_sums.min() < -tol:
        j = int(np.argmin(col_sums))
        return MMatrixCheck(False, f"column {j} not diagonally dominant "
                                   f"(sum {col_sums[j]:.3e})")
    if col_sums.max() <= tol:
        return MMatrixCheck(False, "no strictly dominant column")
    adjacency = sp.csr_matrix((np.abs(off) > tol).astype(float))
    parts, _ = csgraph.connected_components(adjacency, directed=False)
    if n > 1 and parts > 1:
        return MMatrixCheck(False, f"coupling graph splits into {parts} "
                                   f"components")
    return MMatrixCheck(True)


@dataclass
class SpdCheck:
    """Symmetry plus smallest-eigenvalue verdict."""

    ok: bool
    min_eigenvalue: float = None
    witness: str = None


def check_spd_min_eig(matrix):
    """Estimate the smallest eigenvalue of the symmetric part.

    The matrix is shifted below its Gershgorin lower bound and the
    eigenvalue nearest the shift (necessarily the smallest one) is found
    by inverted iteration on the factorized shifted matrix, to a
    relative tolerance of 1e-8. Systems too small for the iterative
    engine are solved densely. The verdict is positive definiteness of
    a verified-symmetric matrix.
    """
    dense = _as_dense(matrix)
    n = dense.shape[0]
    scale = max(np.abs(dense).max(), 1e-300)
    asym = np.abs(dense - dense.T).max()
    symmetric = bool(asym <= SYMMETRY_RTOL * scale)
    sym_part = 0.5 * (dense + dense.T)
    if n < 8:
        lam = float(np.linalg.eigvalsh(sym_part).min())
    else:
        radii = np.abs(sym_part).sum(axis=1) - np.abs(np.diag(sym_part))
        gershgorin = float((np.diag(sym_part) - radii).min())
        shift = gershgorin - 1e-8 * scale
        try:
            found = spla.eigsh(
                sp.csr_matrix(sym_part), k=1, sigma=shift, which="LM",
                tol=EIGENVALUE_RTOL, v0=np.ones(n),
                return_eigenvectors=False,
            )
            lam = float(found[0])
        except (RuntimeError, spla.ArpackError) as exc:
            return SpdCheck(False, None, f"factorization failed: {exc}")
    if not symmetric:
        return SpdCheck(False, lam,
                        f"matrix asymmetry {asym:.3e} exceeds tolerance")
    if lam <= POSITIVE_EIG_RTOL * scale:
        return SpdCheck(False, lam, f"smallest eigenvalue {lam:.3e}")
    return SpdCheck(True, lam)


@dataclass
class StructureCheck:
    """Two-point transmissibility structure of a cell-centred matrix."""

    ok: bool
    symmetric: bool
    nonneg_transmissibility: bool
    interior_rows_balanced: bool
    witness: str = None


def check_peculiar_structure(matrix, mesh):
    """Check the symmetric nonnegative two-point coupling structure.

    A cell-centred matrix has it when it is symmetric, couples distinct
    cells with nonpositive entries, and balances every row whose cell
    touches no boundary edge (the row then reads as a sum of two-point
    differences with nonnegative shared coefficients).
    """
    dense = _as_dense(matrix)
    if dense.shape[0] != mesh.nc:
        raise DiagnosticsError(
            f"matrix has {dense.shape[0]} rows but the mesh has {mesh.nc} "
            f"cells; the structure check needs a cell-centred matrix"
        )
    scale = max(np.abs(dense).max(), 1e-300)
    asym = np.abs(dense - dense.T).max()
    symmetric = bool(asym <= SYMMETRY_RTOL * scale)
    off = dense - np.diag(np.diag(dense))
    nonneg = bool(off.max() <= POSITIVE_OFFDIAG_RTOL * scale)
    interior = [
        k for k in range(mesh.nc)
        if all(mesh.edge_cells[e, 1] != -1 for e in mesh.cell_edges[k])
    ]
    if interior:
        worst = float(np.abs(dense[interior].sum(axis=1)).max())
        balanced = worst <= ROW_SUM_RTOL * scale
    else:
        worst = 0.0
        balanced = True
    witness = None
    if not symmetric:
        witness = f"asymmetry {asym:.3e}"
    elif not nonneg:
        witness = f"positive off-diagonal {off.max():.3e}"
    elif not balanced:
        witness = f"interior row sum {worst:.3e}"
    return StructureCheck(bool(symmetric and nonneg and balanced),
                          symmetric, nonneg, bool(balanced), witness)


# --------------------------------------------------------------------------
# flux laws


@dataclass
class FluxLawCheck:
    """Local conservation verdicts with their residuals."""

    conservative: bool
    balanced: bool
    conservativity_residual: float
    balance_residual: float
    threshold: float


def _flux_residuals(mesh, problem, fluxes):
    src = cell_source_integrals(problem, mesh)
    cons = max(
        (
            abs(fluxes[(int(mesh.edge_cells[e, 0]), int(e))]
                + fluxes[(int(mesh.edge_cells[e, 1]), int(e))])
            for e in mesh.interior_edges
        ),
        default=0.0,
    )
    bal = max(
        abs(sum(fluxes[(k, int(e))] for e in mesh.cell_edges[k]) - src[k])
        for k in range(mesh.nc)
    )
    scale = max(1.0, max(abs(v) for v in fluxes.values()),
                np.abs(src).max())
    return cons, bal, scale


def extract_fluxes(assembled, solution):
    """One-sided fluxes of a solved scheme, linear or frozen nonlinear."""
    if isinstance(assembled, FrozenFluxAssembly):
        values = (solution.values if isinstance(solution, SolutionField)
                  else np.asarray(solution, dtype=float))
        return assembled.frozen_fluxes(values)
    return recover_fluxes(assembled, solution)


def check_flux_laws(assembled, solution, problem):
    """Check edge antisymmetry and per-cell source balance of fluxes."""
    fluxes = extract_fluxes(assembled, solution)
    cons, bal, scale = _flux_residuals(assembled.mesh, problem, fluxes)
    threshold = FLUX_LAW_RTOL * scale
    return FluxLawCheck(bool(cons <= threshold), bool(bal <= threshold),
                        float(cons), float(bal), threshold)


# --------------------------------------------------------------------------
# exactness and extremum principles


@dataclass
class ExactnessCheck:
    """Residual of the interpolated exact solution in the scheme."""

    ok: bool
    residual: float
    threshold: float


def _interpolate_at_dofs(layout, mesh, func):
    values = np.empty(len(layout.free_ids))
    for i, (kind, idx) in enumerate(layout.free_ids):
        if kind == "cell":
            point = mesh.cell_points[idx]
        elif kind == "edge":
            point = mesh.edge_midpoints[idx]
        elif kind == "vertex":
            point = mesh.vertices[idx]
        else:
            raise DiagnosticsError(f"unknown dof kind {kind!r}")
        values[i] = func(point[0], point[1])
    return values


def check_linear_exactness(builder, mesh, case):
    """Inject the exact solution into the assembled equations.

    The exact field is sampled at every unknown location (cell point,
    edge midpoint, vertex) and the infinity norm of the resulting
    residual is compared against 1e-9 of the system scale. Affine cases
    make this a reproduction test for gradient-exact schemes.
    """
    if case.exact is None:
        raise DiagnosticsError("exactness check needs a case with an "
                               "exact solution")
    built = builder(mesh, case)
    if isinstance(built, FrozenFluxAssembly):
        u = np.array([case.exact(*p) for p in mesh.cell_points])
        system = built.freeze(u)
    else:
        u = _interpolate_at_dofs(built.layout, mesh, case.exact)
        system = built.system
    residual = float(np.abs(system.matrix.matvec(u) - system.rhs).max())
    scale = max(1.0, float(np.abs(system.rhs).max()),
                system.matrix.max_abs() * float(np.abs(u).max()))
    threshold = EXACTNESS_RTOL * scale
    return ExactnessCheck(bool(residual <= threshold), residual, threshold)


@dataclass
class MinMaxCheck:
    """Discrete positivity and boundary-range verdicts.

    Each flag is an implication: it only binds when its premise on the
    data holds, and reads true vacuously otherwise.
    """

    positive_ok: bool
    minmax_ok: bool
    solution_min: float
    solution_max: float
    boundary_min: float = None
    boundary_max: float = None
    positive_premise: bool = False
    zero_source_premise: bool = False


def check_minmax(solution, boundary_values, source_values):
    """Judge the solved field against the data-range principles."""
    u = (solution.values if isinstance(solution, SolutionField)
         else np.asarray(solution, dtype=float))
    if isinstance(boundary_values, dict):
        bvals = np.array(sorted(boundary_values.values()), dtype=float)
    else:
        bvals = np.asarray(boundary_values, dtype=float)
    f = np.asarray(source_values, dtype=float)
    b_min = float(bvals.min()) if bvals.size else None
    b_max = float(bvals.max()) if bvals.size else None
    scale = max(1.0, float(np.abs(bvals).max()) if bvals.size else 0.0)
    tol = MINMAX_RTOL * scale
    positive_premise = bool(
        bvals.size and b_min >= 0.0 and (f.size == 0 or f.min() >= 0.0)
    )
    zero_source_premise = bool(
        bvals.size and (f.size == 0 or np.abs(f).max() <= 1e-14 * scale)
    )
    positive_ok = (not positive_premise) or float(u.min()) >= -tol
    minmax_ok = (not zero_source_premise) or (
        float(u.min()) >= b_min - tol and float(u.max()) <= b_max + tol
    )
    return MinMaxCheck(positive_ok, minmax_ok,
                       float(u.min()), float(u.max()), b_min, b_max,
                       positive_premise, zero_source_premise)


# --------------------------------------------------------------------------
# convergence studies


@dataclass
class ConvergenceStudy:
    """Errors and observed orders over a refinement family."""

    mesh_sizes: list
    cell_errors: list
    flux_errors: list
    cell_orders: list
    flux_orders: list
    exact: bool = False
    iterations: list = None


GAUSS3_NODES = (0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0)
GAUSS3_WEIGHTS = (5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0)


def _exact_edge_flux(mesh, tensors, case, k, e):
    a = mesh.vertices[mesh.edge_vertices[e, 0]]
    b = mesh.vertices[mesh.edge_vertices[e, 1]]
    normal = mesh.outward_normal(k, e)
    total = 0.0
    for node, weight in zip(GAUSS3_NODES, GAUSS3_WEIGHTS):
        point = (1.0 - node) * a + node * b
        grad = np.asarray(case.exact_grad(point[0], point[1]), dtype=float)
        total += weight * float((tensors[k] @ grad) @ normal)
    return -total * mesh.edge_lengths[e]


def _solve_built(built, tol, maxit):
    if isinstance(built, FrozenFluxAssembly):
        field_out, result = solve_nonlinear(built, tol=tol, maxit=maxit)
        return field_out, built.frozen_fluxes(field_out.values), \
            result.iterations
    field_out = built.solve()
    return field_out, recover_fluxes(built, field_out), 1


def _observed_orders(sizes, errors, floor):
    orders = []
    for (h0, e0), (h1, e1) in zip(zip(sizes, errors),
                                  zip(sizes[1:], errors[1:])):
        if e0 <= floor or e1 <= floor or h1 >= h0:
            orders.append(float("nan"))
        else:
            orders.append(float(np.log(e0 / e1) / np.log(h0 / h1)))
    return orders


def convergence_study(builder, case, meshes, tol=1e-10, maxit=400):
    """Solve one case on a refinement family and report errors/orders.

    Cell errors are area-weighted L2 distances to the exact solution at
    cell points; flux errors compare one-sided fluxes against 3-point
    Gauss integrals of the exact co-normal flux, weighted per edge by
    the cell-to-cell distance over the edge length. Observed orders use
    consecutive levels; they are undefined (NaN) once an error reaches
    rounding level, and the study is then flagged exact.
    """
    if case.exact is None:
        raise DiagnosticsError("convergence study needs a case with an "
                               "exact solution")
    meshes = list(meshes)
    if len(meshes) < 2:
        raise DiagnosticsError("convergence study needs at least two "
                               "refinement levels")
    sizes, cell_errors, flux_errors, iteration_counts = [], [], [], []
    data_scale = 1.0
    for mesh in meshes:
        built = builder(mesh, case)
        field_out, fluxes, level_iterations = _solve_built(built, tol, maxit)
        iteration_counts.append(level_iterations)
        u = field_out.cell_values(mesh)
        exact = np.array([case.exact(*p) for p in mesh.cell_points])
        data_scale = max(data_scale, float(np.abs(exact).max()))
        cell_err = float(np.sqrt(mesh.cell_areas @ (u - exact) ** 2))
        flux_err = None
        if case.exact_grad is not None:
            tensors = case.tensor.cell_tensors(mesh)
            acc = 0.0
            for e in range(mesh.ne):
                k, l = (int(c) for c in mesh.edge_cells[e])
                other = mesh.cell_points[l] if l != -1 \
                    else mesh.edge_midpoints[e]
                weight = (np.linalg.norm(mesh.cell_points[k] - other)
                          / mesh.edge_lengths[e])
                diff = fluxes[(k, e)] - _exact_edge_flux(
                    mesh, tensors, case, k, e)
                acc += weight * diff * diff
            flux_err = float(np.sqrt(acc))
        sizes.append(mesh.h)
        cell_errors.append(cell_err)
        flux_errors.append(flux_err)
        log.info("level h=%.4g: cell error %.3e, flux error %s",
                 mesh.h, cell_err,
                 "n/a" if flux_err is None else f"{flux_err:.3e}")
    floor = ROUNDING_ERROR_RTOL * data_scale
    cell_orders = _observed_orders(sizes, cell_errors, floor)
    if all(fe is not None for fe in flux_errors):
        flux_orders = _observed_orders(sizes, flux_errors, floor)
    else:
        flux_orders = [float("nan")] * (len(sizes) - 1)
    return ConvergenceStudy(
        mesh_sizes=sizes, cell_errors=cell_errors, flux_errors=flux_errors,
        cell_orders=cell_orders, flux_orders=flux_orders,
        exact=all(err <= floor for err in cell_errors),
        iterations=iteration_counts,
    )


# --------------------------------------------------------------------------
# collected report


@dataclass
class DiagnosticsReport:
    """Flags and scalars from the full check battery on one solve.

    Every flag has a witness entry explaining the measured quantity it
    rests on, so a false flag is always traceable.
    """

    scheme: str
    mesh_descriptor: str
    flags: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)

    def row(self):
        out = {"scheme": self.scheme, "mesh": self.mesh_descriptor}
        for key, value in self.flags.items():
            out[key] = "" if value is None else int(bool(value))
        for key, value in self.scalars.items():
            out[key] = "" if value is None else value
        return out

    def to_json(self):
        return {
            "scheme": self.scheme,
            "mesh": self.mesh_descriptor,
            "flags": dict(self.flags),
            "scalars": dict(self.scalars),
            "witnesses": dict(self.witnesses),
        }


def run_diagnostics(scheme, mesh, problem, built, solution,
                    exactness_builder=None, exactness_case=None):
    """Run every applicable check on a solved scheme and collect a report.

    built is the assembled linear scheme or the frozen nonlinear
    assembly; solution the solved field. The exactness entry is filled
    only when a builder and an exact-solution case are supplied.
    """
    if isinstance(built, FrozenFluxAssembly):
        u = (solution.values if isinstance(solution, SolutionField)
             else np.asarray(solution, dtype=float))
        matrix = built.freeze(u).matrix
        boundary_values = built.boundary_values
    elif isinstance(built, AssembledSystem):
        matrix = built.system.matrix
        boundary_values = built.boundary_values
    else:
        raise DiagnosticsError("run_diagnostics needs an assembled scheme "
                               "or a frozen nonlinear assembly")
    report = DiagnosticsReport(
        scheme=scheme,
        mesh_descriptor=f"{mesh.nc} cells, h={mesh.h:.5g}",
    )
    mm = check_m_matrix(matrix)
    report.flags["m_matrix"] = mm.ok
    report.witnesses["m_matrix"] = mm.violation or "all sign and "\
        "dominance conditions hold"
    spd = check_spd_min_eig(matrix)
    report.flags["spd"] = spd.ok
    report.scalars["min_eigenvalue"] = spd.min_eigenvalue
    report.witnesses["spd"] = spd.witness or "symmetric with positive "\
        "smallest eigenvalue"
    if matrix.shape[0] == mesh.nc:
        structure = check_peculiar_structure(matrix, mesh)
        report.flags["symmetric_nonneg_transmissibility"] = structure.ok
        report.witnesses["symmetric_nonneg_transmissibility"] = (
            structure.witness or "two-point coupling structure holds")
    else:
        report.flags["symmetric_nonneg_transmissibility"] = None
        report.witnesses["symmetric_nonneg_transmissibility"] = (
            "not cell-centred; structure check skipped")
    laws = check_flux_laws(built, solution, problem)
    report.flags["conservative"] = laws.conservative
    report.flags["balanced"] = laws.balanced
    report.scalars["conservativity_residual"] = laws.conservativity_residual
    report.scalars["balance_residual"] = laws.balance_residual
    report.witnesses["conservative"] = (
        f"max edge residual {laws.conservativity_residual:.3e} vs "
        f"threshold {laws.threshold:.3e}")
    report.witnesses["balanced"] = (
        f"max cell residual {laws.balance_residual:.3e} vs threshold "
        f"{laws.threshold:.3e}")
    u_cells = (solution.cell_values(mesh)
               if isinstance(solution, SolutionField)
               else np.asarray(solution, dtype=float))
    minmax = check_minmax(u_cells, boundary_values,
                          cell_source_integrals(problem, mesh))
    report.flags["positive_ok"] = minmax.positive_ok
    report.flags["minmax_ok"] = minmax.minmax_ok
    report.scalars["solution_min"] = minmax.solution_min
    report.scalars["solution_max"] = minmax.solution_max
    report.witnesses["positive_ok"] = (
        "premise holds" if minmax.positive_premise else "vacuous: data "
        "not nonnegative")
    report.witnesses["minmax_ok"] = (
        "premise holds" if minmax.zero_source_premise else "vacuous: "
        "source not zero")
    if exactness_builder is not None and exactness_case is not None:
        exact = check_linear_exactness(exactness_builder, mesh,
                                       exactness_case)
        report.flags["linearly_exact"] = exact.ok
        report.scalars["exactness_residual"] = exact.residual
        report.witnesses["linearly_exact"] = (
            f"residual {exact.residual:.3e} vs threshold "
            f"{exact.threshold:.3e}")
    else:
        report.flags["linearly_exact"] = None
        report.scalars["exactness_residual"] = None
        report.witnesses["linearly_exact"] = "no exactness case supplied"
    return report

"""Multi-point flux schemes built on vertex interaction regions.

Two flux families share the sub-cell gradient machinery:

- the O-variant writes one constant gradient per (cell, vertex) corner,
  couples the corners through sub-flux continuity across each interior
  edge around the vertex, eliminates the per-vertex edge values, and
  accumulates the resulting sub-fluxes into a cell-centred system;
- the L-variant reconstructs three cell-wise affine functions around
  each half-edge, closes them with point continuity plus one-sided flux
  conservativity, and keeps whichever of the two possible closures has
  the better transmissibility signs.

Both produce cell-centred AssembledSystems whose flux tables are exact
linear forms over cell unknowns and boundary edge data.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg

from ..mesh import build_interaction_regions
from ..problem import cell_source_integrals, discretize_boundary
from ..sparse_linalg import LinearSystem, SparseBuilder
from .base import AssembledSystem, DofLayout, SchemeError

logger = logging.getLogger(__name__)

# Sub-cell triangles smaller than this fraction of h^2 are degenerate.
DEGENERATE_AREA_RTOL = 1e-14
# Local dense solves reject pivots below this fraction of the matrix norm.
PIVOT_RTOL = 1e-12


def subcell_gradient(sub, u_cell, u_edge_a, u_edge_b, h=None):
    """Constant gradient on a sub-cell corner from its three point values.

    The values belong to the cell point and to the midpoints of the two
    cell edges meeting at the sub-cell's vertex (in sub.edges order).
    When the mesh size h is supplied, triangles with area below
    1e-14 h^2 are rejected as degenerate.
    """
    if h is not None and sub.tri_area < DEGENERATE_AREA_RTOL * h * h:
        raise SchemeError(
            f"degenerate sub-cell at vertex {sub.vertex} in cell "
            f"{sub.cell}: area {sub.tri_area:.3e} is below the "
            f"1e-14 h^2 floor"
        )
    c_k, c_a, c_b = sub.gradient_coefficients()
    return c_k * u_cell + c_a * u_edge_a + c_b * u_edge_b


def _solve_local(matrix, rhs, what):
    """Dense LU solve with a pivot floor; near-singular systems raise."""
    if matrix.shape[0] == 0:
        return np.zeros((0, rhs.shape[1]))
    lu, piv = scipy.linalg.lu_factor(matrix, check_finite=False)
    pivots = np.abs(np.diag(lu))
    floor = PIVOT_RTOL * np.linalg.norm(matrix)
    if pivots.min() <= floor:
        raise SchemeError(f"singular local system at {what}")
    return scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)


def _add_term(form, dof, coeff):
    form[dof] = form.get(dof, 0.0) + coeff


def _cell_layout(mesh, boundary):
    layout = DofLayout(
        [("cell", k) for k in range(mesh.nc)],
        [("edge", int(e)) for e in mesh.boundary_edges],
    )
    boundary_values = {
        ("edge", int(e)): boundary.edge(int(e)) for e in mesh.boundary_edges
    }
    return layout, boundary_values


def _assemble_cell_system(mesh, problem, flux_forms, scheme, metadata):
    """Turn per-(cell, edge) flux forms into the cell balance system."""
    boundary = discretize_boundary(problem, mesh)
    layout, boundary_values = _cell_layout(mesh, boundary)
    builder = SparseBuilder(mesh.nc)
    rhs = cell_source_integrals(problem, mesh)
    for k in range(mesh.nc):
        for e in mesh.cell_edges[k]:
            for dof, coeff in flux_forms[(k, e)].items():
                if dof[0] == "cell":
                    builder.add(k, dof[1], coeff)
                else:
                    rhs[k] -= coeff * boundary_values[dof]
    system = LinearSystem(builder.build(), rhs)
    flux_map = {
        key: tuple(sorted(form.items())) for key, form in flux_forms.items()
    }
    return AssembledSystem(
        scheme=scheme, mesh=mesh, system=system, layout=layout,
        boundary_values=boundary_values, flux_map=flux_map,
        metadata=metadata,
    )


def assemble_mpfa_o(mesh, problem):
    """O-variant multi-point scheme: per-vertex edge-value elimination.

    Around every vertex, the sub-flux through each half-edge is a linear
    form in the cell value and the two local edge values of its corner.
    Continuity of the two one-sided sub-fluxes across each interior edge
    at the vertex gives a square local system for the interior edge
    values (boundary edge values are fixed by the Dirichlet data, not
    eliminated). Substituting the solved edge values leaves cell-to-cell
    sub-flux forms that are accumulated edge by edge.
    """
    tensors = problem.tensor.cell_tensors(mesh)
    regions = build_interaction_regions(mesh)
    is_bnd = mesh.edge_is_boundary
    flux_forms = {
        (k, e): {} for k in range(mesh.nc) for e in mesh.cell_edges[k]
    }

    for v in range(mesh.nv):
        subs = regions[v]
        edges_v = list(mesh.vertex_edges[v])
        int_local = [e for e in edges_v if not is_bnd[e]]
        bnd_local = [e for e in edges_v if is_bnd[e]]
        iidx = {e: i for i, e in enumerate(int_local)}
        bidx = {e: i for i, e in enumerate(bnd_local)}
        cells_v = [sub.cell for sub in subs]
        cidx = {k: i for i, k in enumerate(cells_v)}
        ni, nb, ncl = len(int_local), len(bnd_local), len(cells_v)

        # Sub-flux coefficient triples per (cell, half-edge) at v:
        # F_{K,e,v} = t_k u_K + t_a u_{edge a} + t_b u_{edge b}.
        triples = {}
        for sub in subs:
            c_k, c_a, c_b = sub.gradient_coefficients()
            lam = tensors[sub.cell]
            for e in sub.edges:
                d_half = float(np.linalg.norm(
                    mesh.edge_midpoints[e] - mesh.vertices[v]
                ))
                w = -d_half * (lam @ mesh.outward_normal(sub.cell, e))
                triples[(sub.cell, e)] = (
                    float(w @ c_k), float(w @ c_a), float(w @ c_b)
                )

        # Local continuity system over the interior edge values at v.
        a_loc = np.zeros((ni, ni))
        b_loc = np.zeros((ni, ncl))
        c_loc = np.zeros((ni, nb))
        for e in int_local:
            r = iidx[e]
            for k in mesh.edge_cells[e]:
                t_k, t_a, t_b = triples[(k, e)]
                e_a, e_b = next(
                    s.edges for s in subs if s.cell == k
                )
                b_loc[r, cidx[k]] += t_k
                for ee, te in ((e_a, t_a), (e_b, t_b)):
                    if is_bnd[ee]:
                        c_loc[r, bidx[ee]] += te
                    else:
                        a_loc[r, iidx[ee]] += te
        x_subst = -_solve_local(
            a_loc, np.hstack([b_loc, c_loc]) if ni else np.zeros((0, 0)),
            f"vertex {v}",
        )

        # Substitute and accumulate the corner sub-fluxes.
        for sub in subs:
            k = sub.cell
            e_a, e_b = sub.edges
            for e in sub.edges:
                t_k, t_a, t_b = triples[(k, e)]
                form = flux_forms[(k, e)]
                _add_term(form, ("cell", k), t_k)
                for ee, te in ((e_a, t_a), (e_b, t_b)):
                    if is_bnd[ee]:
                        _add_term(form, ("edge", int(ee)), te)
                    else:
                        row = x_subst[iidx[ee]]
                        for j, kc in enumerate(cells_v):
                            _add_term(form, ("cell", kc), te * row[j])
                        for j, eb in enumerate(bnd_local):
                            _add_term(
                                form, ("edge", int(eb)), te * row[ncl + j]
                            )

    return _assemble_cell_system(
        mesh, problem, flux_forms, "mpfa_o", {"regions": len(regions)}
    )


def _half_edge_flux_interior(mesh, tensors, sigma, v, via_cell):
    """One candidate half-edge flux form for an interior edge.

    The local reconstruction carries one affine function per involved
    cell. Equations: value continuity across sigma at the vertex and at
    the edge midpoint, the same across the closure edge (via_cell's
    other edge at the vertex), and flux conservativity through both
    edges. A boundary closure edge contributes a single Dirichlet value
    equation at its midpoint instead of the two continuity rows and the
    conservativity row.

    Returns (form, t_k, t_l) where form maps dof ids to coefficients.
    """
    cell_k, cell_l = (int(c) for c in mesh.edge_cells[sigma])
    vx = mesh.vertices[v]
    mid_sigma = mesh.edge_midpoints[sigma]
    n_sigma = mesh.outward_normal(cell_k, sigma)

    e_a, e_b = mesh.cell_edges_at_vertex(via_cell, v)
    closure = e_a if e_b == sigma else e_b
    if closure == sigma:
        raise SchemeError(
            f"cell {via_cell} has edge {sigma} twice at vertex {v}"
        )
    closure_bnd = mesh.edge_is_boundary[closure]
    mid_closure = mesh.edge_midpoints[closure]
    n_closure = mesh.outward_normal(via_cell, closure)

    cells = [cell_k, cell_l]
    cell_m = None
    if not closure_bnd:
        cell_m = int(mesh.other_cell(closure, via_cell))
        if cell_m in cells:
            raise SchemeError(
                f"closure cell {cell_m} already appears at half-edge "
                f"(edge {sigma}, vertex {v})"
            )
        cells.append(cell_m)
    gidx = {k: 2 * i for i, k in enumerate(cells)}
    ng = 2 * len(cells)
    data = [("cell", k) for k in cells]
    if closure_bnd:
        data.append(("edge", int(closure)))
    didx = {d: i for i, d in enumerate(data)}
    nd = len(data)

    rows = []
    rhs_rows = []

    def continuity(point, cell_a, cell_b):
        row = np.zeros(ng)
        row[gidx[cell_a]:gidx[cell_a] + 2] = point - mesh.cell_points[cell_a]
        row[gidx[cell_b]:gidx[cell_b] + 2] -= point - mesh.cell_points[cell_b]
        r = np.zeros(nd)
        r[didx[("cell", cell_b)]] = 1.0
        r[didx[("cell", cell_a)]] = -1.0
        rows.append(row)
        rhs_rows.append(r)

    def conservativity(edge, cell_a, cell_b, normal):
        row = np.zeros(ng)
        row[gidx[cell_a]:gidx[cell_a] + 2] = tensors[cell_a] @ normal
        row[gidx[cell_b]:gidx[cell_b] + 2] -= tensors[cell_b] @ normal
        rows.append(row)
        rhs_rows.append(np.zeros(nd))

    continuity(vx, cell_k, cell_l)
    continuity(mid_sigma, cell_k, cell_l)
    conservativity(sigma, cell_k, cell_l, n_sigma)
    if closure_bnd:
        row = np.zeros(ng)
        row[gidx[via_cell]:gidx[via_cell] + 2] = (
            mid_closure - mesh.cell_points[via_cell]
        )
        r = np.zeros(nd)
        r[didx[("edge", int(closure))]] = 1.0
        r[didx[("cell", via_cell)]] = -1.0
        rows.append(row)
        rhs_rows.append(r)
    else:
        continuity(vx, via_cell, cell_m)
        continuity(mid_closure, via_cell, cell_m)
        conservativity(closure, via_cell, cell_m, n_closure)

    matrix = np.array(rows)
    rhs = np.array(rhs_rows)
    grads = _solve_local(
        matrix, rhs, f"half-edge (edge {sigma}, vertex {v})"
    )
    d_half = float(np.linalg.norm(mid_sigma - vx))
    w = -d_half * (tensors[cell_k] @ n_sigma)
    coeffs = w @ grads[gidx[cell_k]:gidx[cell_k] + 2]
    form = {d: float(c) for d, c in zip(data, coeffs)}
    return form, form.get(("cell", cell_k), 0.0), form.get(
        ("cell", cell_l), 0.0
    )


def _half_edge_flux_boundary(mesh, tensors, sigma, v):
    """Half-edge flux form for a boundary edge (single closure).

    The Dirichlet value on sigma's midpoint pins the reconstruction in
    the owning cell; the cell's other edge at the vertex closes the
    system, either through the neighbouring cell (continuity plus
    conservativity) or through a second Dirichlet value.
    """
    cell_k = int(mesh.edge_cells[sigma, 0])
    vx = mesh.vertices[v]
    mid_sigma = mesh.edge_midpoints[sigma]
    n_sigma = mesh.outward_normal(cell_k, sigma)

    e_a, e_b = mesh.cell_edges_at_vertex(cell_k, v)
    closure = e_a if e_b == sigma else e_b
    closure_bnd = mesh.edge_is_boundary[closure]
    mid_closure = mesh.edge_midpoints[closure]

    cells = [cell_k]
    if not closure_bnd:
        cells.append(int(mesh.other_cell(closure, cell_k)))
    gidx = {k: 2 * i for i, k in enumerate(cells)}
    ng = 2 * len(cells)
    data = [("cell", k) for k in cells] + [("edge", int(sigma))]
    if closure_bnd:
        data.append(("edge", int(closure)))
    didx = {d: i for i, d in enumerate(data)}
    nd = len(data)

    rows = []
    rhs_rows = []

    def dirichlet(point, edge):
        row = np.zeros(ng)
        row[gidx[cell_k]:gidx[cell_k] + 2] = point - mesh.cell_points[cell_k]
        r = np.zeros(nd)
        r[didx[("edge", int(edge))]] = 1.0
        r[didx[("cell", cell_k)]] = -1.0
        rows.append(row)
        rhs_rows.append(r)

    dirichlet(mid_sigma, sigma)
    if closure_bnd:
        dirichlet(mid_closure, closure)
    else:
        cell_m = cells[1]
        n_closure = mesh.outward_normal(cell_k, closure)
        for point in (vx, mid_closure):
            row = np.zeros(ng)
            row[gidx[cell_k]:gidx[cell_k] + 2] = (
                point - mesh.cell_points[cell_k]
            )
            row[gidx[cell_m]:gidx[cell_m] + 2] -= (
                point - mesh.cell_points[cell_m]
            )
            r = np.zeros(nd)
            r[didx[("cell", cell_m)]] = 1.0
            r[didx[("cell", cell_k)]] = -1.0
            rows.append(row)
            rhs_rows.append(r)
        row = np.zeros(ng)
        row[gidx[cell_k]:gidx[cell_k] + 2] = tensors[cell_k] @ n_closure
        row[gidx[cell_m]:gidx[cell_m] + 2] -= tensors[cell_m] @ n_closure
        rows.append(row)
        rhs_rows.append(np.zeros(nd))

    matrix = np.array(rows)
    rhs = np.array(rhs_rows)
    grads = _solve_local(
        matrix, rhs, f"half-edge (edge {sigma}, vertex {v})"
    )
    d_half = float(np.linalg.norm(mid_sigma - vx))
    w = -d_half * (tensors[cell_k] @ n_sigma)
    coeffs = w @ grads[gidx[cell_k]:gidx[cell_k] + 2]
    return {d: float(c) for d, c in zip(data, coeffs)}


def assemble_mpfa_l(mesh, problem):
    """L-variant multi-point scheme: per-half-edge three-cell closures.

    Every interior half-edge has two candidate flux expressions, closed
    through either adjacent cell's other edge at the vertex. A candidate
    is admissible when the coefficient of the owning cell is positive
    and the coefficient of the facing cell negative; among admissible
    (or, failing that, all solvable) candidates the one with the larger
    owning-cell coefficient wins. The selection is logged per half-edge.
    """
    tensors = problem.tensor.cell_tensors(mesh)
    flux_forms = {
        (k, e): {} for k in range(mesh.nc) for e in mesh.cell_edges[k]
    }
    selection_log = []

    for sigma in mesh.interior_edges:
        sigma = int(sigma)
        cell_k, cell_l = (int(c) for c in mesh.edge_cells[sigma])
        total = {}
        for v in mesh.edge_vertices[sigma]:
            v = int(v)
            candidates = []
            for tag, via in (("via_first", cell_k), ("via_second", cell_l)):
                try:
                    form, t_k, t_l = _half_edge_flux_interior(
                        mesh, tensors, sigma, v, via
                    )
                except SchemeError:
                    continue
                candidates.append((tag, form, t_k, t_l))
            if not candidates:
                raise SchemeError(
                    f"both closures are singular at half-edge "
                    f"(edge {sigma}, vertex {v})"
                )
            admissible = [c for c in candidates if c[2] > 0.0 > c[3]]
            pool = admissible if admissible else candidates
            chosen = max(pool, key=lambda c: (abs(c[2]), c[0] == "via_first"))
            selection_log.append({
                "edge": sigma, "vertex": v, "candidate": chosen[0],
                "t_own": chosen[2], "t_other": chosen[3],
                "admissible": len(admissible),
            })
            logger.debug(
                "mpfa_l edge %d vertex %d -> %s (t_K=%.3e, t_L=%.3e)",
                sigma, v, chosen[0], chosen[2], chosen[3],
            )
            for dof, coeff in chosen[1].items():
                _add_term(total, dof, coeff)
        flux_forms[(cell_k, sigma)] = total
        flux_forms[(cell_l, sigma)] = {d: -c for d, c in total.items()}

    for sigma in mesh.boundary_edges:
        sigma = int(sigma)
        cell_k = int(mesh.edge_cells[sigma, 0])
        total = flux_forms[(cell_k, sigma)]
        for v in mesh.edge_vertices[sigma]:
            form = _half_edge_flux_boundary(mesh, tensors, sigma, int(v))
            for dof, coeff in form.items():
                _add_term(total, dof, coeff)

    return _assemble_cell_system(
        mesh, problem, flux_forms, "mpfa_l", {"l_selection": selection_log}
    )

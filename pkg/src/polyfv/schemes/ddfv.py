"""Discrete-duality scheme with cell and vertex unknowns.

Every edge carries a diamond spanned by the edge endpoints and the two
adjacent cell points; a constant gradient lives on each diamond, exact
on affine data. Primal balances run over the mesh cells and dual
balances over the dual cells around interior vertices, both using the
same diamond fluxes, so the two families are conservative across their
respective edges by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..mesh import build_diamonds, point_in_polygon, polygon_area
from ..problem import (
    cell_source_integrals,
    discretize_boundary,
    dual_source_integrals,
)
from ..sparse_linalg import LinearSystem, SparseBuilder
from .base import AssembledSystem, DofLayout, SchemeError, recover_fluxes

logger = logging.getLogger(__name__)

# The affine-exactness guard targets construction errors, which show up
# at order one; the slack absorbs coordinate roundoff amplified by the
# inverse diamond area on fine perturbed meshes.
AFFINE_CHECK_RTOL = 1e-9
TILING_RTOL = 1e-10


@dataclass
class DiamondData:
    """Diamond geometry plus the effective tensor on it.

    lam is the area-weighted mean of the cell tensors over the two
    half-diamonds (the single adjacent tensor on boundary diamonds).
    """

    diamond: object
    lam: np.ndarray


def diamond_gradient(data, u_cell_k, u_cell_l, u_v1, u_v2):
    """Constant diamond gradient from the four surrounding values.

    u_cell_l is the boundary edge value on boundary diamonds (the
    collapsed second point).
    """
    d = data.diamond
    if d.area <= 0.0:
        raise SchemeError(f"degenerate diamond at edge {d.edge}")
    return (
        (u_cell_l - u_cell_k) * d.d_dual * d.n_primal
        + (u_v2 - u_v1) * d.d_primal * d.n_dual
    ) / (2.0 * d.area)


def build_diamond_data(mesh, tensors):
    """DiamondData per edge, with the affine-exactness invariant checked."""
    dset = build_diamonds(mesh)
    out = []
    slope = np.array([0.4, -1.1])
    for d in dset:
        if d.cell_l < 0:
            lam = np.asarray(tensors[d.cell_k], dtype=float)
        else:
            a = mesh.vertices[d.v1]
            b = mesh.vertices[d.v2]
            tri_k = abs(polygon_area([a, b, d.x_k]))
            tri_l = abs(polygon_area([a, b, d.x_l]))
            lam = (tri_k * np.asarray(tensors[d.cell_k], dtype=float)
                   + tri_l * np.asarray(tensors[d.cell_l], dtype=float))
            lam /= d.area
        data = DiamondData(diamond=d, lam=lam)
        g = diamond_gradient(
            data,
            slope @ d.x_k, slope @ d.x_l,
            slope @ mesh.vertices[d.v1], slope @ mesh.vertices[d.v2],
        )
        if np.abs(g - slope).max() > AFFINE_CHECK_RTOL:
            raise SchemeError(
                f"internal error: diamond of edge {d.edge} is not exact "
                f"on affine data"
            )
        out.append(data)
    return out


@dataclass
class DualMesh:
    """Dual cells: one polygon per vertex, tiling the domain.

    Interior vertices get the loop of surrounding cell points; boundary
    vertices get that fan closed through the two adjacent boundary edge
    midpoints and the vertex itself.
    """

    loops: tuple
    areas: np.ndarray
    total_area: float


def build_dual_mesh(mesh):
    """Build the dual cell around every vertex and verify the tiling.

    A dual cell that folds over (non-positive area, or an interior
    vertex falling outside its own polygon) raises an error naming the
    vertex; so does a family that fails to tile the domain.
    """
    loops = []
    areas = np.empty(mesh.nv)
    for v in range(mesh.nv):
        edges, cells, closed = mesh.vertex_star(v)
        points = [mesh.cell_points[k] for k in cells]
        if closed:
            loop = np.array(points)
        else:
            loop = np.array(
                [mesh.vertices[v], mesh.edge_midpoints[edges[0]]]
                + points + [mesh.edge_midpoints[edges[-1]]]
            )
        area = polygon_area(loop)
        if area <= 0.0:
            raise SchemeError(
                f"dual cell of vertex {v} is degenerate or inverted"
            )
        if closed and not point_in_polygon(mesh.vertices[v], loop):
            raise SchemeError(
                f"dual cell of vertex {v} does not contain its vertex; "
                f"dual cells would overlap"
            )
        loops.append(loop)
        areas[v] = area
    total = float(areas.sum())
    if abs(total - mesh.domain_area) > TILING_RTOL * mesh.domain_area:
        raise SchemeError(
            f"dual cells do not tile the domain: {total} vs "
            f"{mesh.domain_area}"
        )
    return DualMesh(loops=tuple(loops), areas=areas, total_area=total)


def _fan_polygon(mesh, dual, v):
    """Vertex-apex fan covering the dual cell, for source quadrature."""
    loop = dual.loops[v]
    if mesh.vertex_is_boundary[v]:
        return loop
    return np.vstack([mesh.vertices[v][None, :], loop, loop[:1]])


def assemble_ddfv(mesh, problem):
    """Primal cell balances plus dual balances around interior vertices.

    Unknowns are all cells and the interior vertices; Dirichlet data
    fixes boundary edge midpoint values (collapsed diamond points) and
    boundary vertex values. Both balance families use the same diamond
    fluxes F = -(measure) (Lambda_D grad_D u) . n.
    """
    tensors = problem.tensor.cell_tensors(mesh)
    boundary = discretize_boundary(problem, mesh)
    dual = build_dual_mesh(mesh)
    diamonds = build_diamond_data(mesh, tensors)

    interior_vertices = [int(v) for v in
                         np.flatnonzero(~mesh.vertex_is_boundary)]
    free = [("cell", k) for k in range(mesh.nc)]
    free += [("vertex", v) for v in interior_vertices]
    bnd_ids = [("edge", int(e)) for e in mesh.boundary_edges]
    bnd_ids += [("vertex", int(v)) for v in
                np.flatnonzero(mesh.vertex_is_boundary)]
    layout = DofLayout(free, bnd_ids)
    boundary_values = {}
    for e in mesh.boundary_edges:
        boundary_values[("edge", int(e))] = boundary.edge(int(e))
    for v in np.flatnonzero(mesh.vertex_is_boundary):
        boundary_values[("vertex", int(v))] = boundary.vertex(int(v))

    # Per-diamond flux forms over the four surrounding dofs.
    primal_forms = {}
    dual_forms = {}
    for data in diamonds:
        d = data.diamond
        e = d.edge
        inv = 1.0 / (2.0 * d.area)
        c_l = inv * d.d_dual * (data.lam @ d.n_primal)
        c_v2 = inv * d.d_primal * (data.lam @ d.n_dual)
        dof_l = (("cell", d.cell_l) if d.cell_l >= 0 else ("edge", e))
        dofs = [("cell", d.cell_k), dof_l,
                ("vertex", d.v1), ("vertex", d.v2)]
        lam_grad = np.array([-c_l, c_l, -c_v2, c_v2])  # rows: coeff vectors
        pc = -d.d_dual * (lam_grad @ d.n_primal)
        dc = -d.d_primal * (lam_grad @ d.n_dual)
        primal_forms[(d.cell_k, e)] = tuple(zip(dofs, map(float, pc)))
        if d.cell_l >= 0:
            primal_forms[(d.cell_l, e)] = tuple(
                zip(dofs, (-float(c) for c in pc)))
        dual_forms[(d.v1, e)] = tuple(zip(dofs, map(float, dc)))
        dual_forms[(d.v2, e)] = tuple(zip(dofs, (-float(c) for c in dc)))

    builder = SparseBuilder(len(free))
    rhs = np.zeros(len(free))
    rhs[:mesh.nc] = cell_source_integrals(problem, mesh)
    fans = {v: _fan_polygon(mesh, dual, v) for v in interior_vertices}
    dual_src = dual_source_integrals(problem, mesh, fans)

    def add_form(row, form):
        for dof, coeff in form:
            if layout.is_free(dof):
                builder.add(row, layout.row(dof), coeff)
            else:
                rhs[row] -= coeff * boundary_values[dof]

    for k in range(mesh.nc):
        row = layout.row(("cell", k))
        for e in mesh.cell_edges[k]:
            add_form(row, primal_forms[(k, int(e))])
    for v in interior_vertices:
        row = layout.row(("vertex", v))
        rhs[row] += dual_src[v]
        for e in mesh.vertex_edges[v]:
            add_form(row, dual_forms[(v, int(e))])

    system = LinearSystem(builder.build(), rhs)
    return AssembledSystem(
        scheme="ddfv", mesh=mesh, system=system, layout=layout,
        boundary_values=boundary_values, flux_map=primal_forms,
        metadata={"dual_flux_map": dual_forms, "dual_mesh": dual},
    )


def recover_ddfv_fluxes(assembled, solution):
    """Primal fluxes keyed (cell, edge) and dual fluxes keyed (vertex, edge)."""
    if assembled.scheme != "ddfv":
        raise SchemeError("recover_ddfv_fluxes needs a discrete-duality "
                          "system")
    primal = recover_fluxes(assembled, solution)
    dual = {}
    for key, form in assembled.metadata["dual_flux_map"].items():
        dual[key] = float(sum(c * solution.get(d) for d, c in form))
    return primal, dual

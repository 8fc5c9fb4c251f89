"""Nonlinear monotone and extremum-preserving flux schemes.

Every scheme here produces a FrozenFluxAssembly: a factory that, given a
current solution estimate, assembles the linear system whose coefficients
are frozen at that estimate. Fixed-point (Picard) iteration on the frozen
systems yields solutions with structural guarantees that linear schemes
cannot offer on distorted meshes: nonnegative solutions for nonnegative
data (monotone two-point schemes), solutions inside the boundary-data
range (the multi-point scheme), or a discrete minimum principle grafted
onto an accurate cell-centred base scheme (the nonlinear correction).

The monotone schemes write every interior flux as alpha u_K - beta u_L
with alpha, beta >= 0 by combining two one-sided consistent fluxes with
solution-dependent convex weights chosen so that the auxiliary vertex
values cancel from the combination. Vertex values are convex
combinations of nearby cell values within one tensor-smoothness zone,
clamped at zero so the weights stay admissible. The multi-point scheme
traces co-normal rays through each edge, interpolates at a point beyond
the neighboring cell, and recombines the two one-sided expansions so
that every matrix row keeps nonnegative coupling coefficients at every
frozen state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..mesh import _ray_edge_intersection, rot90
from ..problem import cell_source_integrals, discretize_boundary
from ..sparse_linalg import (
    LinearSystem,
    SparseBuilder,
    SparseMatrix,
    picard_solve,
)
from .base import DofLayout, SchemeError, SolutionField, recover_fluxes
from .hmm import assemble_hmm
from .tpfa import assemble_tpfa

logger = logging.getLogger(__name__)

# relative floors for the geometric constructions (scaled by mesh.h or
# squared mesh.h where noted)
PARALLEL_RTOL = 1e-12        # co-normal ray direction vs edge line
FORWARD_RTOL = 1e-12         # minimal advance along a ray
EXACT_HIT_RTOL = 1e-12       # ray passes through a cell point
COINCIDENT_RTOL = 1e-14      # interpolation point sits on a cell point
DEGENERATE_AREA_RTOL = 1e-14
IDENTITY_RTOL = 1e-12        # tensor must equal Id for the triangle scheme
CONE_SIGN_RTOL = 1e-12       # tolerated negative part of cone coefficients
PATTERN_RTOL = 1e-14         # stencil-symmetry pattern threshold
CORRECTION_EPS_RTOL = 1e-12  # strict margin added to the correction bounds


# -- vertex interpolation -----------------------------------------------------


@dataclass
class VertexInterpolator:
    """Convex per-vertex combinations of adjacent cell values.

    weights[v] is a tuple of (cell, weight) pairs with nonnegative
    weights summing to one. Cells are restricted to the smoothness zone
    holding the most cells adjacent to v (ties pick the lowest zone
    label), so vertex values never average across a tensor discontinuity.
    """

    weights: tuple
    zones: tuple

    def value(self, v, u_cells):
        return float(sum(w * u_cells[c] for c, w in self.weights[v]))

    def values(self, u_cells):
        u = np.asarray(u_cells, dtype=float)
        return np.array(
            [sum(w * u[c] for c, w in pairs) for pairs in self.weights]
        )


def build_vertex_interpolator(mesh, zones=None):
    """Inverse-distance convex weights over one zone of adjacent cells.

    zones labels each cell with an integer smoothness-zone id (all zero
    when omitted). Per vertex, the zone with the most adjacent cells is
    selected (ties go to the lowest label) and the weights are inverse
    distances from the vertex to the cell points of that zone,
    normalized to sum to one.
    """
    if zones is None:
        zones = np.zeros(mesh.nc, dtype=int)
    zones = np.asarray(zones, dtype=int)
    if zones.shape != (mesh.nc,):
        raise SchemeError("zones must give one integer label per cell")
    floor = COINCIDENT_RTOL * mesh.h
    all_weights = []
    chosen = []
    for v in range(mesh.nv):
        cells = mesh.vertex_cells[v]
        counts = {}
        for k in cells:
            z = int(zones[k])
            counts[z] = counts.get(z, 0) + 1
        zone = min(counts, key=lambda z: (-counts[z], z))
        group = [k for k in cells if int(zones[k]) == zone]
        d = np.array(
            [
                np.linalg.norm(mesh.cell_points[k] - mesh.vertices[v])
                for k in group
            ]
        )
        w = 1.0 / np.maximum(d, floor)
        w = w / w.sum()
        all_weights.append(tuple(zip(group, map(float, w))))
        chosen.append(zone)
    return VertexInterpolator(weights=tuple(all_weights), zones=tuple(chosen))


def _default_vertex_values(mesh, problem):
    """Frozen vertex values: zone-aware interpolation, clamped at zero.

    Boundary vertices take the Dirichlet trace; interior vertices take
    the interpolated value; negative parts are clamped so that the
    convex combination weights built from these values stay admissible.
    """
    interp = build_vertex_interpolator(mesh, problem.tensor.cell_zones(mesh))
    boundary = discretize_boundary(problem, mesh)
    traces = {
        int(v): boundary.vertex(int(v))
        for v in np.flatnonzero(mesh.vertex_is_boundary)
    }

    def fn(u_cells):
        vals = interp.values(u_cells)
        for v, val in traces.items():
            vals[v] = val
        return np.maximum(vals, 0.0)

    return fn


# -- frozen assemblies and the Picard driver ----------------------------------


@dataclass
class FrozenFluxAssembly:
    """Factory for linear systems frozen at a solution estimate.

    freeze(u) assembles the LinearSystem whose row K realizes the flux
    balance of cell K with coefficients frozen at u. frozen_fluxes(u)
    returns the one-sided fluxes {(cell, edge): value} of the frozen
    scheme evaluated at u itself; at a Picard fixed point these are
    conservative and balance the source. metadata["guarantee"] names the
    structural property every frozen system is built to satisfy.
    """

    scheme: str
    mesh: object
    layout: DofLayout
    boundary_values: dict
    freeze: object
    frozen_fluxes: object
    metadata: dict = field(default_factory=dict)


def solve_nonlinear(assembly, u0=None, tol=1e-8, maxit=200, omega=1.0,
                    callback=None):
    """Picard iteration on a frozen-flux assembly.

    u0 defaults to a constant vector at the midpoint of the boundary
    value range. callback(iteration, iterate, frozen_system) runs after
    each linear solve (structural per-iterate checks plug in here).
    Returns (SolutionField, PicardResult); non-convergence raises
    PicardDivergenceError carrying the increment history.
    """
    if u0 is None:
        if assembly.boundary_values:
            vals = np.fromiter(assembly.boundary_values.values(), dtype=float)
            mid = 0.5 * (vals.min() + vals.max())
        else:
            mid = 0.0
        u0 = np.full(assembly.layout.n, mid)
    result = picard_solve(assembly.freeze, u0, tol=tol, maxit=maxit,
                          omega=omega, callback=callback)
    field = SolutionField(
        layout=assembly.layout,
        values=result.solution,
        boundary_values=dict(assembly.boundary_values),
    )
    logger.debug(
        "%s: Picard converged in %d iterations",
        assembly.scheme, result.iterations,
    )
    return field, result


# -- shared geometry ----------------------------------------------------------


def _ray_to_edge_line(mesh, origin, direction, e, what):
    """Intersection of origin + [0, inf) * direction with the line of e."""
    a = mesh.vertices[mesh.edge_vertices[e, 0]]
    b = mesh.vertices[mesh.edge_vertices[e, 1]]
    n_line = rot90(b - a)
    denom = float(direction @ n_line)
    scale = float(np.linalg.norm(direction) * np.linalg.norm(n_line))
    if abs(denom) <= PARALLEL_RTOL * scale:
        raise SchemeError(
            f"co-normal ray {what} is parallel to edge {e}"
        )
    t = float((a - origin) @ n_line) / denom
    if t <= 0.0:
        raise SchemeError(
            f"co-normal ray {what} points away from edge {e}"
        )
    return origin + t * direction, t


def _boundary_ray_rows(mesh, tensors, problem):
    """Two-point boundary fluxes along the co-normal rays.

    For each boundary edge the co-normal ray from the cell point meets
    the edge line at y; the flux |sigma| / t (u_K - u_b(y)) is exact for
    affine solutions and keeps a positive coefficient on u_K. Returns
    [(cell, edge, coefficient, boundary value, point)].
    """
    rows = []
    for e in mesh.boundary_edges:
        e = int(e)
        k = int(mesh.edge_cells[e, 0])
        direction = tensors[k] @ mesh.outward_normal(k, e)
        point, t = _ray_to_edge_line(
            mesh, mesh.cell_points[k], direction, e, f"from cell {k}"
        )
        coeff = float(mesh.edge_lengths[e]) / t
        rows.append((k, e, coeff, float(problem.dirichlet(*point)), point))
    return rows


def _cell_layout(mesh, boundary_rows):
    layout = DofLayout(
        free_ids=[("cell", k) for k in range(mesh.nc)],
        boundary_ids=[("edge", int(e)) for e in mesh.boundary_edges],
    )
    boundary_values = {("edge", e): val for _, e, _, val, _ in boundary_rows}
    return layout, boundary_values


# -- monotone two-point scheme on triangular meshes ---------------------------


def triangle_flux_coefficients(vertex, x_k, x_l, co_normal, length,
                               scale, what=""):
    """Flux coefficients of the plane through (vertex, x_k, x_l).

    The flux of that plane across an edge with the given length and
    co-normal direction is c_k (u_K - u_v) + c_l (u_L - u_v); returns
    (c_k, c_l, triangle area). Raises SchemeError when the three points
    are nearly collinear (area below 1e-14 scale^2).
    """
    m = np.array([x_k - vertex, x_l - vertex], dtype=float)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    area = 0.5 * abs(det)
    if area <= DEGENERATE_AREA_RTOL * scale ** 2:
        raise SchemeError(f"degenerate flux triangle{what}")
    c = -length * np.linalg.solve(m.T, np.asarray(co_normal, dtype=float))
    return float(c[0]), float(c[1]), area


@dataclass
class _TriEdge:
    e: int
    k: int
    l: int
    v1: int
    v2: int
    ck1: float
    cl1: float
    area1: float
    ck2: float
    cl2: float
    area2: float


def frozen_monotone_triangular(mesh, problem, vertex_values=None):
    """Monotone two-point scheme on triangular meshes with identity tensor.

    Each interior flux combines the two plane fluxes spanned by an edge
    endpoint and the two adjacent cell points. The combination weights
    are proportional to the opposite triangle's frozen vertex value over
    its area; this cancels the vertex values from the combination and
    leaves alpha u_K - beta u_L with alpha, beta > 0 when the cell
    points are incenters. Both endpoint values zero falls back to equal
    weights. vertex_values(u_cells) optionally replaces the default
    frozen vertex values (interpolation + boundary traces, clamped at
    zero), for example to study consistency with exact vertex data.
    """
    for k, loop in enumerate(mesh.cells):
        if len(loop) != 3:
            raise SchemeError(
                f"cell {k} has {len(loop)} vertices; the monotone "
                "triangular scheme needs a triangular mesh"
            )
    tensors = problem.tensor.cell_tensors(mesh)
    deviation = float(np.max(np.abs(tensors - np.eye(2))))
    if deviation > IDENTITY_RTOL:
        raise SchemeError(
            "the monotone triangular scheme needs the identity tensor; "
            f"largest deviation from Id is {deviation:.3e}"
        )
    if vertex_values is None:
        vertex_values = _default_vertex_values(mesh, problem)

    records = []
    for e in mesh.interior_edges:
        e = int(e)
        k, l = (int(c) for c in mesh.edge_cells[e])
        v1, v2 = (int(v) for v in mesh.edge_vertices[e])
        n = mesh.outward_normal(k, e)
        length = float(mesh.edge_lengths[e])
        x_k, x_l = mesh.cell_points[k], mesh.cell_points[l]
        ck1, cl1, a1 = triangle_flux_coefficients(
            mesh.vertices[v1], x_k, x_l, n, length, mesh.h,
            what=f" at vertex {v1} of edge {e}",
        )
        ck2, cl2, a2 = triangle_flux_coefficients(
            mesh.vertices[v2], x_k, x_l, n, length, mesh.h,
            what=f" at vertex {v2} of edge {e}",
        )
        records.append(_TriEdge(e, k, l, v1, v2, ck1, cl1, a1, ck2, cl2, a2))

    boundary_rows = _boundary_ray_rows(mesh, tensors, problem)
    layout, boundary_values = _cell_layout(mesh, boundary_rows)
    source = cell_source_integrals(problem, mesh)

    def _assemble(u):
        u = np.asarray(u, dtype=float)
        vals = vertex_values(u)
        builder = SparseBuilder(mesh.nc)
        rhs = source.copy()
        fluxes = {}
        detail = {}
        for r in records:
            t1 = vals[r.v1] / r.area1
            t2 = vals[r.v2] / r.area2
            s = t1 + t2
            if s != 0.0:
                mu1, mu2 = t2 / s, t1 / s
            else:
                mu1 = mu2 = 0.5
            alpha = mu1 * r.ck1 + mu2 * r.ck2
            beta = -(mu1 * r.cl1 + mu2 * r.cl2)
            builder.add(r.k, r.k, alpha)
            builder.add(r.k, r.l, -beta)
            builder.add(r.l, r.l, beta)
            builder.add(r.l, r.k, -alpha)
            f = alpha * u[r.k] - beta * u[r.l]
            fluxes[(r.k, r.e)] = f
            fluxes[(r.l, r.e)] = -f
            detail[r.e] = {
                "mu": (mu1, mu2),
                "alpha": alpha,
                "beta": beta,
                "areas": (r.area1, r.area2),
                "cells": (r.k, r.l),
            }
        for k, e, coeff, value, _ in boundary_rows:
            builder.add(k, k, coeff)
            rhs[k] += coeff * value
            fluxes[(k, e)] = coeff * (u[k] - value)
        system = LinearSystem(builder.build(), rhs,
                              dof_labels=layout.free_ids)
        return system, fluxes, detail

    return FrozenFluxAssembly(
        scheme="mono_tri",
        mesh=mesh,
        layout=layout,
        boundary_values=boundary_values,
        freeze=lambda u: _assemble(u)[0],
        frozen_fluxes=lambda u: _assemble(u)[1],
        metadata={
            "guarantee": "minimum_principle",
            "interior": tuple(records),
            "boundary_rows": tuple(boundary_rows),
            "frozen_detail": lambda u: _assemble(u)[2],
        },
    )


# -- monotone two-point scheme on polygonal meshes ----------------------------


def cone_flux_coefficients(mesh, tensors, k, e):
    """Nonnegative decomposition of the co-normal in a vertex cone of k.

    Scans vertex pairs of cell k in loop order and returns
    (v1, v2, a, b) for the first pair whose directions from the cell
    point span tensors[k] @ n_{k,e} with nonnegative coefficients. The
    coefficients carry the edge length, so the one-sided flux reads
    a (u_K - u_{v1}) + b (u_K - u_{v2}) and is exact on affine data.
    """
    x = mesh.cell_points[k]
    target = tensors[k] @ mesh.outward_normal(k, e)
    loop = mesh.cells[k]
    length = float(mesh.edge_lengths[e])
    for i in range(len(loop)):
        d1 = mesh.vertices[loop[i]] - x
        for j in range(i + 1, len(loop)):
            d2 = mesh.vertices[loop[j]] - x
            det = d1[0] * d2[1] - d1[1] * d2[0]
            if abs(det) <= 1e-14 * np.linalg.norm(d1) * np.linalg.norm(d2):
                continue
            c1 = (target[0] * d2[1] - target[1] * d2[0]) / det
            c2 = (d1[0] * target[1] - d1[1] * target[0]) / det
            tol = CONE_SIGN_RTOL * max(abs(c1), abs(c2))
            if c1 >= -tol and c2 >= -tol:
                return (
                    int(loop[i]),
                    int(loop[j]),
                    length * max(c1, 0.0),
                    length * max(c2, 0.0),
                )
    raise SchemeError(
        f"no vertex pair of cell {k} spans the co-normal of edge {e} "
        "with nonnegative coefficients"
    )


@dataclass
class _PolyEdge:
    e: int
    k: int
    l: int
    v1: int
    v2: int
    a_k: float
    b_k: float
    v3: int
    v4: int
    a_l: float
    b_l: float


def frozen_monotone_polygonal(mesh, problem, vertex_values=None):
    """Monotone two-point scheme on general meshes and full tensors.

    Each side of an interior edge decomposes its co-normal in the
    positive cone of two cell-vertex directions, giving a one-sided flux
    with nonnegative vertex couplings. The two sides are combined with
    convex weights proportional to the opposite side's frozen vertex
    part, which cancels the vertex values exactly and leaves
    alpha u_K - beta u_L with alpha, beta >= 0 at every admissible
    frozen state. A vanishing denominator falls back to equal weights.
    vertex_values(u_cells) optionally replaces the default frozen vertex
    values (zone-aware interpolation + boundary traces, clamped at zero).
    """
    tensors = problem.tensor.cell_tensors(mesh)
    if vertex_values is None:
        vertex_values = _default_vertex_values(mesh, problem)

    records = []
    cones = {}
    for e in mesh.interior_edges:
        e = int(e)
        k, l = (int(c) for c in mesh.edge_cells[e])
        v1, v2, a_k, b_k = cone_flux_coefficients(mesh, tensors, k, e)
        v3, v4, a_l, b_l = cone_flux_coefficients(mesh, tensors, l, e)
        cones[(k, e)] = (v1, v2, a_k, b_k)
        cones[(l, e)] = (v3, v4, a_l, b_l)
        records.append(_PolyEdge(e, k, l, v1, v2, a_k, b_k, v3, v4, a_l, b_l))

    boundary_rows = _boundary_ray_rows(mesh, tensors, problem)
    layout, boundary_values = _cell_layout(mesh, boundary_rows)
    source = cell_source_integrals(problem, mesh)

    def _assemble(u):
        u = np.asarray(u, dtype=float)
        vals = vertex_values(u)
        builder = SparseBuilder(mesh.nc)
        rhs = source.copy()
        fluxes = {}
        detail = {}
        for r in records:
            own = r.a_k * vals[r.v1] + r.b_k * vals[r.v2]
            other = r.a_l * vals[r.v3] + r.b_l * vals[r.v4]
            s = own + other
            if s != 0.0:
                mu1, mu2 = other / s, own / s
            else:
                mu1 = mu2 = 0.5
            alpha = mu1 * (r.a_k + r.b_k)
            beta = mu2 * (r.a_l + r.b_l)
            builder.add(r.k, r.k, alpha)
            builder.add(r.k, r.l, -beta)
            builder.add(r.l, r.l, beta)
            builder.add(r.l, r.k, -alpha)
            f = alpha * u[r.k] - beta * u[r.l]
            fluxes[(r.k, r.e)] = f
            fluxes[(r.l, r.e)] = -f
            detail[r.e] = {
                "mu": (mu1, mu2),
                "alpha": alpha,
                "beta": beta,
                "vertex_parts": (own, other),
                "cells": (r.k, r.l),
            }
        for k, e, coeff, value, _ in boundary_rows:
            builder.add(k, k, coeff)
            rhs[k] += coeff * value
            fluxes[(k, e)] = coeff * (u[k] - value)
        system = LinearSystem(builder.build(), rhs,
                              dof_labels=layout.free_ids)
        return system, fluxes, detail

    return FrozenFluxAssembly(
        scheme="mono_poly",
        mesh=mesh,
        layout=layout,
        boundary_values=boundary_values,
        freeze=lambda u: _assemble(u)[0],
        frozen_fluxes=lambda u: _assemble(u)[1],
        metadata={
            "guarantee": "minimum_principle",
            "interior": tuple(records),
            "cones": cones,
            "boundary_rows": tuple(boundary_rows),
            "frozen_detail": lambda u: _assemble(u)[2],
        },
    )


# -- extremum-preserving multi-point scheme -----------------------------------


def mmp_combination_weights(g1, g2):
    """Convex weights and row factors from the two frozen expansions.

    Returns (mu1, mu2, theta_own, theta_other). The convex weights are
    |g2| and |g1| normalized (one half each when both vanish). The theta
    factors scale the multi-point parts of the two per-row flux
    decompositions; they vanish unless g1 and g2 share a strict sign, in
    which case theta_own g1 = theta_other g2 = mu1 g1 + mu2 g2.
    """
    a1, a2 = abs(g1), abs(g2)
    total = a1 + a2
    if total == 0.0:
        return 0.5, 0.5, 0.0, 0.0
    mu1, mu2 = a2 / total, a1 / total
    if g1 * g2 > 0.0:
        return mu1, mu2, 2.0 * a2 / total, 2.0 * a1 / total
    return mu1, mu2, 0.0, 0.0


@dataclass
class _MmpSide:
    x1: np.ndarray
    m2: np.ndarray
    hit_cell: int
    exact_hit: bool
    support: tuple
    fixed: tuple
    w1: float
    w2: float
    coeff: float
    alpha: float


@dataclass
class _MmpEdge:
    e: int
    k: int
    l: int
    alpha_bar: float
    alpha_k: float
    alpha_l: float
    beta_k: dict
    beta_l: dict
    fixed_k: tuple
    fixed_l: tuple
    side_k: _MmpSide
    side_l: _MmpSide


def _cell_adjacency(mesh):
    nbrs = [set() for _ in range(mesh.nc)]
    for e in mesh.interior_edges:
        k, l = (int(c) for c in mesh.edge_cells[e])
        nbrs[k].add(l)
        nbrs[l].add(k)
    return [tuple(sorted(s)) for s in nbrs]


def _boundary_exits(mesh, origin, direction, tol_forward):
    """Forward intersections of a ray with the domain boundary edges.

    Returns [(t, edge)] with t in units of the (possibly unnormalized)
    direction vector.
    """
    hits = []
    for eb in mesh.boundary_edges:
        eb = int(eb)
        res = _ray_edge_intersection(
            origin, direction,
            mesh.vertices[mesh.edge_vertices[eb, 0]],
            mesh.vertices[mesh.edge_vertices[eb, 1]],
        )
        if res is None:
            continue
        t, s = res
        if t > tol_forward and -1e-9 <= s <= 1.0 + 1e-9:
            hits.append((float(t), eb))
    return hits


def _mmp_side(mesh, tensors, nbrs, dirichlet, e, k, l):
    """One-sided multi-point expansion of the flux out of k through e.

    Traces the co-normal ray of k to the edge line, continues along the
    co-normal of l, projects the nearest cell point within two edge
    layers onto that second ray, and interpolates there with convex
    inverse-distance weights over the neighborhood of l and of the
    projected cell. An exact hit on the cross neighbor reduces the
    expansion to the pure two-point flux. When no cell point lies ahead
    of the ray (strong anisotropy near the boundary), the ray's exit
    point through the domain boundary serves as interpolation node with
    its Dirichlet value, mixed with the cross neighbor so that u_L keeps
    a strictly positive coefficient.
    """
    n = mesh.outward_normal(k, e)
    dir1 = tensors[k] @ n
    x1, t1 = _ray_to_edge_line(
        mesh, mesh.cell_points[k], dir1, e, f"from cell {k}"
    )
    w1 = 1.0 / t1
    dir2 = tensors[l] @ n
    norm2 = float(np.linalg.norm(dir2))
    if norm2 == 0.0:
        raise SchemeError(
            f"co-normal of cell {l} vanishes on edge {e}"
        )
    dhat = dir2 / norm2

    layer = {k, l}
    for _ in range(2):
        layer |= {m for c in tuple(layer) for m in nbrs[c]}
    candidates = sorted(layer - {k})
    tol_forward = FORWARD_RTOL * mesh.h
    floor = COINCIDENT_RTOL * mesh.h
    found = []
    for c in candidates:
        rel = mesh.cell_points[c] - x1
        t = float(rel @ dhat)
        if t <= tol_forward:
            continue
        perp = float(np.linalg.norm(rel - t * dhat))
        found.append((perp, t, c))
    fixed = ()
    exact_hit = False
    if found:
        dmin = min(f[0] for f in found)
        near = [f for f in found if f[0] <= dmin + tol_forward]
        _, t_star, hit = min(near, key=lambda f: (f[1], f[2]))
        m2 = x1 + t_star * dhat
        exact_hit = dmin < EXACT_HIT_RTOL * mesh.h
        if exact_hit and hit == l:
            support = ((l, 1.0),)
        else:
            cells = sorted({l, hit} | set(nbrs[l]) | set(nbrs[hit]))
            d = np.array(
                [np.linalg.norm(mesh.cell_points[c] - m2) for c in cells]
            )
            w = 1.0 / np.maximum(d, floor)
            w = w / w.sum()
            support = tuple(zip(cells, map(float, w)))
        w2 = norm2 / t_star
        coeff = float(mesh.edge_lengths[e]) * w1 * w2 / (w1 + w2)
    else:
        # The rays of this side escape the mesh (strong anisotropy near
        # the boundary). Anchor the expansion at a boundary point with
        # known Dirichlet value: the second ray's exit through the
        # domain boundary, or, when even that never meets the domain,
        # the first ray's own exit point. The cross neighbor keeps a
        # strictly positive weight in the interpolation.
        hits = _boundary_exits(mesh, x1, dhat, tol_forward)
        if hits:
            t_star, hit_edge = min(hits)
            m2 = x1 + t_star * dhat
            w2 = norm2 / t_star
            coeff = float(mesh.edge_lengths[e]) * w1 * w2 / (w1 + w2)
        else:
            exits = _boundary_exits(
                mesh, mesh.cell_points[k], dir1, tol_forward
            )
            if not exits:
                raise SchemeError(
                    f"no interpolation point ahead of edge {e} along "
                    f"the co-normal ray from cell {k}"
                )
            t_exit, hit_edge = min(exits)
            m2 = mesh.cell_points[k] + t_exit * dir1
            w2 = float("inf")
            coeff = float(mesh.edge_lengths[e]) / t_exit
        hit = -1 - hit_edge  # encode: boundary edge index, not a cell
        d_l = max(np.linalg.norm(mesh.cell_points[l] - m2), floor)
        w = np.array([1.0 / d_l, 1.0 / floor])
        w = w / w.sum()
        support = ((l, float(w[0])),)
        fixed = ((float(dirichlet(*m2)), float(w[1])),)
    alpha = coeff * sum(w for c, w in support if c == l)
    return _MmpSide(
        x1=x1, m2=m2, hit_cell=hit, exact_hit=exact_hit, support=support,
        fixed=fixed, w1=w1, w2=w2, coeff=coeff, alpha=alpha,
    )


def frozen_mmp(mesh, problem):
    """Multi-point scheme preserving the boundary-data range.

    Both sides of an interior edge expand the flux through co-normal ray
    tracing and convex interpolation; the shared two-point coefficient
    is the smaller of the two one-sided ones, the excess joins the
    multi-point parts, and the frozen convex combination of the parts is
    rewritten per row so that every row keeps nonnegative couplings with
    strictly positive coupling toward the cross-edge neighbor. With zero
    source the converged solution therefore stays within the range of
    the boundary data. On meshes and tensors where both rays meet the
    edge at the same point and pass through the neighbor cell points,
    the scheme reduces to the two-point scheme.
    """
    tensors = problem.tensor.cell_tensors(mesh)
    nbrs = _cell_adjacency(mesh)

    records = []
    for e in mesh.interior_edges:
        e = int(e)
        k, l = (int(c) for c in mesh.edge_cells[e])
        side_k = _mmp_side(mesh, tensors, nbrs, problem.dirichlet, e, k, l)
        side_l = _mmp_side(mesh, tensors, nbrs, problem.dirichlet, e, l, k)
        alpha_bar = min(side_k.alpha, side_l.alpha)
        beta_k = {
            m: side_k.coeff * w
            for m, w in side_k.support
            if m not in (k, l)
        }
        if side_k.alpha > alpha_bar:
            beta_k[l] = beta_k.get(l, 0.0) + (side_k.alpha - alpha_bar)
        beta_l = {
            m: side_l.coeff * w
            for m, w in side_l.support
            if m not in (k, l)
        }
        if side_l.alpha > alpha_bar:
            beta_l[k] = beta_l.get(k, 0.0) + (side_l.alpha - alpha_bar)
        fixed_k = tuple((val, side_k.coeff * w) for val, w in side_k.fixed)
        fixed_l = tuple((val, side_l.coeff * w) for val, w in side_l.fixed)
        records.append(
            _MmpEdge(e, k, l, alpha_bar, side_k.alpha, side_l.alpha,
                     beta_k, beta_l, fixed_k, fixed_l, side_k, side_l)
        )

    boundary_rows = _boundary_ray_rows(mesh, tensors, problem)
    layout, boundary_values = _cell_layout(mesh, boundary_rows)
    source = cell_source_integrals(problem, mesh)

    def _assemble(u):
        u = np.asarray(u, dtype=float)
        builder = SparseBuilder(mesh.nc)
        rhs = source.copy()
        fluxes = {}
        detail = {}
        for r in records:
            g1 = sum(b * (u[r.k] - u[m]) for m, b in r.beta_k.items())
            g1 += sum(b * (u[r.k] - val) for val, b in r.fixed_k)
            gt2 = sum(b * (u[r.l] - u[m]) for m, b in r.beta_l.items())
            gt2 += sum(b * (u[r.l] - val) for val, b in r.fixed_l)
            mu1, mu2, theta_k, theta_l = mmp_combination_weights(g1, -gt2)
            builder.add(r.k, r.k, r.alpha_bar)
            builder.add(r.k, r.l, -r.alpha_bar)
            builder.add(r.l, r.l, r.alpha_bar)
            builder.add(r.l, r.k, -r.alpha_bar)
            if theta_k != 0.0:
                for m, b in r.beta_k.items():
                    builder.add(r.k, r.k, theta_k * b)
                    builder.add(r.k, m, -theta_k * b)
                for val, b in r.fixed_k:
                    builder.add(r.k, r.k, theta_k * b)
                    rhs[r.k] += theta_k * b * val
            if theta_l != 0.0:
                for m, b in r.beta_l.items():
                    builder.add(r.l, r.l, theta_l * b)
                    builder.add(r.l, m, -theta_l * b)
                for val, b in r.fixed_l:
                    builder.add(r.l, r.l, theta_l * b)
                    rhs[r.l] += theta_l * b * val
            fluxes[(r.k, r.e)] = r.alpha_bar * (u[r.k] - u[r.l]) \
                + theta_k * g1
            fluxes[(r.l, r.e)] = r.alpha_bar * (u[r.l] - u[r.k]) \
                + theta_l * gt2
            detail[r.e] = {
                "alpha_bar": r.alpha_bar,
                "alphas": (r.alpha_k, r.alpha_l),
                "g": (g1, gt2),
                "mu": (mu1, mu2),
                "theta": (theta_k, theta_l),
            }
        for k, e, coeff, value, _ in boundary_rows:
            builder.add(k, k, coeff)
            rhs[k] += coeff * value
            fluxes[(k, e)] = coeff * (u[k] - value)
        system = LinearSystem(builder.build(), rhs,
                              dof_labels=layout.free_ids)
        return system, fluxes, detail

    return FrozenFluxAssembly(
        scheme="mmp",
        mesh=mesh,
        layout=layout,
        boundary_values=boundary_values,
        freeze=lambda u: _assemble(u)[0],
        frozen_fluxes=lambda u: _assemble(u)[1],
        metadata={
            "guarantee": "minmax",
            "edges": tuple(records),
            "boundary_rows": tuple(boundary_rows),
            "frozen_detail": lambda u: _assemble(u)[2],
        },
    )


# -- nonlinear correction of cell-centred linear schemes ----------------------


def apply_nonlinear_correction(base, mesh, problem):
    """Graft a discrete minimum principle onto a cell-centred scheme.

    base is "tpfa", "hmm", or a callable (mesh, problem) returning a
    cell-centred AssembledSystem. The hybrid mimetic base is reduced to
    cell unknowns by exact elimination of its edge unknowns; callables
    must already be cell-centred. Each freeze adds symmetric nonnegative
    couplings beta_{K,Z} = max(lb_K, lb_Z) + eps on interior mesh edges
    and beta = lb_K + eps toward each boundary edge, where lb_K is the
    magnitude of the base cell residual divided by the summed absolute
    neighbor differences (zero when that denominator vanishes) and eps
    is 1e-12 times the largest absolute row sum of the base matrix. The
    addition vanishes on constants, keeps the base accuracy, and makes a
    converged iterate obey the discrete minimum principle.
    """
    if callable(base):
        assembled = base(mesh, problem)
        non_cell = [d for d in assembled.layout.free_ids if d[0] != "cell"]
        if non_cell:
            raise SchemeError(
                "base scheme is not cell-centred (free unknowns "
                f"{non_cell[:4]}...); pass 'hmm' for the hybrid base"
            )
    elif base == "tpfa":
        assembled = assemble_tpfa(mesh, problem)
    elif base == "hmm":
        assembled = assemble_hmm(mesh, problem)
    else:
        raise SchemeError(
            f"unknown base scheme {base!r} for the nonlinear correction"
        )

    layout_b = assembled.layout
    cell_rows = [layout_b.row(("cell", k)) for k in range(mesh.nc)]
    other_rows = [
        i for i, d in enumerate(layout_b.free_ids) if d[0] != "cell"
    ]
    rhs_full = assembled.system.rhs

    if other_rows:
        dense = assembled.system.matrix.to_dense()
        a_cc = dense[np.ix_(cell_rows, cell_rows)]
        a_co = dense[np.ix_(cell_rows, other_rows)]
        a_oc = dense[np.ix_(other_rows, cell_rows)]
        a_oo = dense[np.ix_(other_rows, other_rows)]
        lu = scipy.linalg.lu_factor(a_oo)
        base_matrix = SparseMatrix.from_dense(
            a_cc - a_co @ scipy.linalg.lu_solve(lu, a_oc)
        )
        base_rhs = rhs_full[cell_rows] - a_co @ scipy.linalg.lu_solve(
            lu, rhs_full[other_rows]
        )

        def lift(u):
            full = np.empty(layout_b.n)
            full[cell_rows] = u
            full[other_rows] = scipy.linalg.lu_solve(
                lu, rhs_full[other_rows] - a_oc @ u
            )
            return full

    else:
        if cell_rows == list(range(mesh.nc)):
            base_matrix = assembled.system.matrix
            base_rhs = rhs_full.copy()
        else:
            dense = assembled.system.matrix.to_dense()
            base_matrix = SparseMatrix.from_dense(
                dense[np.ix_(cell_rows, cell_rows)]
            )
            base_rhs = rhs_full[cell_rows]

        def lift(u):
            full = np.empty(layout_b.n)
            full[cell_rows] = u
            return full

    csr = base_matrix.csr
    scale = float(np.abs(csr).max()) if csr.nnz else 0.0
    pattern = abs(csr) > PATTERN_RTOL * scale
    if (pattern != pattern.T).nnz != 0:
        raise SchemeError(
            "base scheme stencil is not symmetric; the correction needs "
            "Z coupled to K exactly when K is coupled to Z"
        )
    eps = CORRECTION_EPS_RTOL * float(
        np.max(np.abs(csr).sum(axis=1)) if csr.nnz else 0.0
    )

    boundary = discretize_boundary(problem, mesh)
    pairs = [
        (int(mesh.edge_cells[e, 0]), int(mesh.edge_cells[e, 1]), int(e))
        for e in mesh.interior_edges
    ]
    bnd = [
        (int(mesh.edge_cells[e, 0]), int(e), boundary.edge(int(e)))
        for e in mesh.boundary_edges
    ]
    source = cell_source_integrals(problem, mesh)
    rhs_bc = base_rhs - source

    layout = DofLayout(
        free_ids=[("cell", k) for k in range(mesh.nc)],
        boundary_ids=[("edge", e) for _, e, _ in bnd],
    )
    boundary_values = {("edge", e): val for _, e, val in bnd}

    def _freeze_parts(u):
        u = np.asarray(u, dtype=float)
        residual = base_matrix.matvec(u) - rhs_bc
        denom = np.zeros(mesh.nc)
        for k, l, _ in pairs:
            d = abs(u[k] - u[l])
            denom[k] += d
            denom[l] += d
        for k, _, val in bnd:
            denom[k] += abs(u[k] - val)
        lb = np.zeros(mesh.nc)
        nz = denom > 0.0
        lb[nz] = np.abs(residual[nz]) / denom[nz]
        beta_pairs = {e: max(lb[k], lb[l]) + eps for k, l, e in pairs}
        beta_bnd = {e: lb[k] + eps for k, e, _ in bnd}
        delta = SparseBuilder(mesh.nc)
        rhs = base_rhs.copy()
        for k, l, e in pairs:
            b = beta_pairs[e]
            delta.add(k, k, b)
            delta.add(l, l, b)
            delta.add(k, l, -b)
            delta.add(l, k, -b)
        for k, e, val in bnd:
            b = beta_bnd[e]
            delta.add(k, k, b)
            rhs[k] += b * val
        matrix = SparseMatrix(base_matrix.csr + delta.build().csr)
        system = LinearSystem(matrix, rhs, dof_labels=layout.free_ids)
        return system, lb, beta_pairs, beta_bnd

    def frozen_fluxes(u):
        u = np.asarray(u, dtype=float)
        field = assembled.field_from_vector(lift(u))
        out = dict(recover_fluxes(assembled, field))
        _, _, beta_pairs, beta_bnd = _freeze_parts(u)
        for k, l, e in pairs:
            extra = beta_pairs[e] * (u[k] - u[l])
            out[(k, e)] += extra
            out[(l, e)] -= extra
        for k, e, val in bnd:
            out[(k, e)] += beta_bnd[e] * (u[k] - val)
        return out

    def frozen_detail(u):
        _, lb, beta_pairs, beta_bnd = _freeze_parts(u)
        return {
            "lb": lb,
            "beta": beta_pairs,
            "beta_boundary": beta_bnd,
            "epsilon": eps,
        }

    return FrozenFluxAssembly(
        scheme=f"corrected({assembled.scheme})",
        mesh=mesh,
        layout=layout,
        boundary_values=boundary_values,
        freeze=lambda u: _freeze_parts(u)[0],
        frozen_fluxes=frozen_fluxes,
        metadata={
            "guarantee": "minimum_principle",
            "base": assembled.scheme,
            "epsilon": eps,
            "base_matrix": base_matrix,
            "frozen_detail": frozen_detail,
        },
    )

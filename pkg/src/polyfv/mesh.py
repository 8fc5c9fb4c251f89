"""Polygonal mesh container and generators for 2D finite-volume schemes.

A mesh is a conforming partition of a polygonal domain into simple polygons,
each carrying a "cell point" used by the discretizations (barycenter by
default, incenter variants for the monotone triangular schemes). Edges are
derived from the cell loops; every edge stores its length, midpoint and the
unit normal pointing out of its first incident cell.

Derived structures needed by specific scheme families live here as well:
diamonds (one quadrilateral per edge, spanned by the edge and the two
adjacent cell points) and interaction regions (per-vertex groups of
sub-cells with precomputed gradient geometry).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Relative tolerance for degenerate geometry: areas and lengths below
# 1e-14 * (domain scale) are treated as construction errors.
DEGENERATE_RTOL = 1e-14


class MeshError(Exception):
    """Raised when mesh construction or validation fails."""


def rot90(v):
    """Rotate a 2-vector (or array of them) by +90 degrees."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def polygon_area(points):
    """Signed shoelace area of a polygon given as an (n, 2) array."""
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def polygon_centroid(points):
    """Area centroid (center of gravity) of a simple polygon."""
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    if abs(a) < 1e-300:
        return p.mean(axis=0)
    cx = np.sum((x + xn) * cross) / (6.0 * a)
    cy = np.sum((y + yn) * cross) / (6.0 * a)
    return np.array([cx, cy])


def point_in_polygon(point, points, tol=0.0):
    """Strict point-in-polygon test (ray crossing).

    Returns False for points on (or within tol of) the boundary, so it can
    enforce "strictly inside" with a margin.
    """
    p = np.asarray(points, dtype=float)
    x, y = float(point[0]), float(point[1])
    n = len(p)
    # reject points within tol of any edge segment
    for i in range(n):
        a, b = p[i], p[(i + 1) % n]
        ab = b - a
        t = np.dot([x, y] - a, ab) / max(np.dot(ab, ab), 1e-300)
        t = min(max(t, 0.0), 1.0)
        if np.hypot(*(a + t * ab - [x, y])) <= tol:
            return False
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = p[i]
        xj, yj = p[j]
        if (yi > y) != (yj > y):
            x_cross = xi + (y - yi) / (yj - yi) * (xj - xi)
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def triangle_incenter(a, b, c, metric=None):
    """Incenter of triangle (a, b, c) as the edge-length weighted vertex mean.

    Weights are the lengths of the opposite sides. With a metric matrix M
    (SPD), lengths are measured as sqrt(d^T M d), which yields the incenter
    for the corresponding anisotropic metric; metric=None means Euclidean.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)

    def length(d):
        if metric is None:
            return float(np.hypot(*d))
        return float(np.sqrt(d @ metric @ d))

    la = length(c - b)  # opposite vertex a
    lb = length(a - c)
    lc = length(b - a)
    return (la * a + lb * b + lc * c) / (la + lb + lc)


class Mesh:
    """Immutable conforming polygonal mesh.

    Parameters
    ----------
    vertices : (nv, 2) array of vertex coordinates.
    cells : sequence of vertex-index loops, each counter-clockwise.
    cell_points : optional (nc, 2) array; defaults to area centroids.
    """

    def __init__(self, vertices, cells, cell_points=None):
        self.vertices = np.array(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (nv, 2) array")
        self.cells = tuple(tuple(int(v) for v in loop) for loop in cells)
        if not self.cells:
            raise MeshError("mesh needs at least one cell")
        for k, loop in enumerate(self.cells):
            if len(loop) < 3:
                raise MeshError(f"cell {k} has fewer than 3 vertices")
            if len(set(loop)) != len(loop):
                raise MeshError(f"cell {k} repeats a vertex")

        self.nv = len(self.vertices)
        self.nc = len(self.cells)

        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        self._scale = float(max(span.max(), 1e-300))
        areatol = DEGENERATE_RTOL * self._scale ** 2
        lentol = DEGENERATE_RTOL * self._scale

        # cell areas and centroids (loops must be ccw)
        self.cell_areas = np.empty(self.nc)
        self.cell_centroids = np.empty((self.nc, 2))
        for k, loop in enumerate(self.cells):
            pts = self.vertices[list(loop)]
            a = polygon_area(pts)
            if a <= areatol:
                raise MeshError(
                    f"cell {k} has non-positive or degenerate area {a:.3e}"
                )
            self.cell_areas[k] = a
            self.cell_centroids[k] = polygon_centroid(pts)

        if cell_points is None:
            self.cell_points = self.cell_centroids.copy()
        else:
            self.cell_points = np.array(cell_points, dtype=float)
            if self.cell_points.shape != (self.nc, 2):
                raise MeshError("cell_points must be an (nc, 2) array")

        # edges: first traversal owns the stored orientation and normal
        edge_index = {}
        ev, ec = [], []
        cell_edges = []
        for k, loop in enumerate(self.cells):
            edges_k = []
            m = len(loop)
            for i in range(m):
                a, b = loop[i], loop[(i + 1) % m]
                key = (a, b) if a < b else (b, a)
                if key not in edge_index:
                    e = len(ev)
                    edge_index[key] = e
                    ev.append((a, b))
                    ec.append([k, -1])
                else:
                    e = edge_index[key]
                    if ec[e][1] != -1:
                        raise MeshError(
                            f"edge {key} shared by more than two cells"
                        )
                    if ev[e] == (a, b):
                        raise MeshError(
                            f"cells {ec[e][0]} and {k} traverse edge {key} "
                            "in the same direction (inconsistent orientation)"
                        )
                    ec[e][1] = k
                edges_k.append(e)
            cell_edges.append(tuple(edges_k))
        self.cell_edges = tuple(cell_edges)
        self.edge_vertices = np.array(ev, dtype=np.int64)
        self.edge_cells = np.array(ec, dtype=np.int64)
        self.ne = len(ev)

        tang = (
            self.vertices[self.edge_vertices[:, 1]]
            - self.vertices[self.edge_vertices[:, 0]]
        )
        self.edge_lengths = np.hypot(tang[:, 0], tang[:, 1])
        if np.any(self.edge_lengths <= lentol):
            e = int(np.argmin(self.edge_lengths))
            raise MeshError(f"edge {e} is degenerate (length ~ 0)")
        self.edge_midpoints = 0.5 * (
            self.vertices[self.edge_vertices[:, 0]]
            + self.vertices[self.edge_vertices[:, 1]]
        )
        # outward normal of the first incident cell: rotate tangent by -90
        self.edge_normals = np.column_stack(
            (tang[:, 1], -tang[:, 0])
        ) / self.edge_lengths[:, None]

        self.edge_is_boundary = self.edge_cells[:, 1] < 0
        self.boundary_edges = np.flatnonzero(self.edge_is_boundary)
        self.interior_edges = np.flatnonzero(~self.edge_is_boundary)

        self.vertex_is_boundary = np.zeros(self.nv, dtype=bool)
        for e in self.boundary_edges:
            self.vertex_is_boundary[self.edge_vertices[e]] = True

        vertex_cells = [[] for _ in range(self.nv)]
        for k, loop in enumerate(self.cells):
            for v in loop:
                vertex_cells[v].append(k)
        self.vertex_cells = tuple(tuple(sorted(c)) for c in vertex_cells)
        vertex_edges = [[] for _ in range(self.nv)]
        for e in range(self.ne):
            for v in self.edge_vertices[e]:
                vertex_edges[v].append(e)
        self.vertex_edges = tuple(tuple(sorted(s)) for s in vertex_edges)

        diam = np.zeros(self.nc)
        for k, loop in enumerate(self.cells):
            pts = self.vertices[list(loop)]
            d = pts[:, None, :] - pts[None, :, :]
            diam[k] = np.sqrt((d ** 2).sum(axis=2).max())
        self.cell_diameters = diam
        self.h = float(diam.max())
        self.domain_area = float(self.cell_areas.sum())

        self._star_cache = {}
        for arr in (
            self.vertices, self.cell_points, self.cell_areas,
            self.cell_centroids, self.edge_vertices, self.edge_cells,
            self.edge_lengths, self.edge_midpoints, self.edge_normals,
            self.cell_diameters,
        ):
            arr.flags.writeable = False

        self.validate()

    # -- basic queries ----------------------------------------------------

    def edge_sign(self, cell, edge):
        """+1 if the stored edge normal points out of `cell`, else -1."""
        if self.edge_cells[edge, 0] == cell:
            return 1.0
        if self.edge_cells[edge, 1] == cell:
            return -1.0
        raise MeshError(f"cell {cell} is not incident to edge {edge}")

    def outward_normal(self, cell, edge):
        """Unit normal on `edge` pointing out of `cell`."""
        return self.edge_sign(cell, edge) * self.edge_normals[edge]

    def other_cell(self, edge, cell):
        """The cell across `edge` from `cell` (-1 for boundary edges)."""
        a, b = self.edge_cells[edge]
        if a == cell:
            return int(b)
        if b == cell:
            return int(a)
        raise MeshError(f"cell {cell} is not incident to edge {edge}")

    def cell_edges_at_vertex(self, cell, vertex):
        """The two edges of `cell` meeting at `vertex`, in ccw loop order.

        Returns (e_in, e_out): the loop edge ending at the vertex and the
        one leaving it.
        """
        loop = self.cells[cell]
        i = loop.index(vertex)
        m = len(loop)
        return self.cell_edges[cell][(i - 1) % m], self.cell_edges[cell][i]

    def vertex_star(self, vertex):
        """Ordered fan of edges and cells around a vertex.

        Returns (edges, cells, closed): edges and cells alternate
        counter-clockwise around the vertex. For an interior vertex the fan
        is closed (len(edges) == len(cells), edge i separates cells i-1 and
        i). For a boundary vertex the fan is open, starts and ends with the
        two boundary edges (len(edges) == len(cells) + 1, cell i lies
        between edges i and i+1).
        """
        if vertex in self._star_cache:
            return self._star_cache[vertex]
        incident_edges = set(self.vertex_edges[vertex])
        bnd = [e for e in incident_edges if self.edge_is_boundary[e]]
        closed = not bnd
        if closed:
            first = min(incident_edges)
        else:
            if len(bnd) != 2:
                raise MeshError(
                    f"boundary vertex {vertex} has {len(bnd)} boundary edges"
                )
            first = None  # chosen below so the walk runs ccw

        def next_around(edge, cell):
            e_in, e_out = self.cell_edges_at_vertex(cell, vertex)
            return e_out if edge == e_in else e_in

        def walk(start_edge, start_cell):
            edges, cells = [start_edge], []
            cell = start_cell
            edge = start_edge
            while cell != -1:
                cells.append(cell)
                edge = next_around(edge, cell)
                edges.append(edge)
                if edge == start_edge:
                    return edges[:-1], cells
                cell = self.other_cell(edge, cell)
            return edges, cells

        if closed:
            edges, cells = walk(first, int(self.edge_cells[first, 0]))
        else:
            # a boundary edge has one cell; try both boundary edges and keep
            # the ccw walk
            edges, cells = walk(bnd[0], int(self.edge_cells[bnd[0], 0]))
        # enforce ccw: the cross product from the first edge direction to
        # the first cell point direction must be positive
        v0 = self.vertices[vertex]
        e0 = edges[0]
        other = (
            self.edge_vertices[e0, 1]
            if self.edge_vertices[e0, 0] == vertex
            else self.edge_vertices[e0, 0]
        )
        t_edge = self.vertices[other] - v0
        t_cell = self.cell_points[cells[0]] - v0
        if t_edge[0] * t_cell[1] - t_edge[1] * t_cell[0] < 0:
            edges = edges[::-1]
            cells = cells[::-1]
            if closed:
                # keep "cell i lies between edges i and i+1" after the flip
                cells = cells[1:] + cells[:1]
        result = (tuple(edges), tuple(cells), closed)
        self._star_cache[vertex] = result
        return result

    # -- validation --------------------------------------------------------

    def validate(self):
        """Check structural invariants; raises MeshError on failure."""
        areatol = DEGENERATE_RTOL * self._scale ** 2
        if np.any(self.cell_areas <= areatol):
            k = int(np.argmin(self.cell_areas))
            raise MeshError(f"cell {k} has degenerate area")
        # closure: the outward edge normals of a cell sum to zero
        for k in range(self.nc):
            s = np.zeros(2)
            for e in self.cell_edges[k]:
                s += self.edge_lengths[e] * self.outward_normal(k, e)
            if np.hypot(*s) > 1e-12 * self._scale:
                raise MeshError(f"cell {k} violates normal closure: {s}")
        # cell points strictly inside their cells
        for k, loop in enumerate(self.cells):
            pts = self.vertices[list(loop)]
            margin = DEGENERATE_RTOL * self._scale
            if not point_in_polygon(self.cell_points[k], pts, tol=margin):
                raise MeshError(
                    f"cell point of cell {k} is not strictly inside the cell"
                )
        return True

    def with_cell_points(self, rule="barycenter", tensors=None):
        """Copy of the mesh with cell points recomputed by `rule`.

        rule is one of "barycenter", "incenter", "lambda_incenter"; the
        incenter rules require triangular cells, and the lambda variant
        needs `tensors` (an (nc, 2, 2) array) whose inverses define the
        per-cell metric.
        """
        if rule == "barycenter":
            return Mesh(self.vertices, self.cells)
        if rule not in ("incenter", "lambda_incenter"):
            raise MeshError(f"unknown cell point rule: {rule!r}")
        pts = np.empty((self.nc, 2))
        for k, loop in enumerate(self.cells):
            if len(loop) != 3:
                raise MeshError(
                    f"cell {k} is not a triangle; incenter rule unavailable"
                )
            a, b, c = (self.vertices[v] for v in loop)
            metric = None
            if rule == "lambda_incenter":
                if tensors is None:
                    raise MeshError("lambda_incenter rule needs tensors")
                metric = np.linalg.inv(np.asarray(tensors[k], float))
            pts[k] = triangle_incenter(a, b, c, metric=metric)
        return Mesh(self.vertices, self.cells, cell_points=pts)


# -- generators -------------------------------------------------------------


def build_cartesian(nx, ny, domain=(0.0, 0.0, 1.0, 1.0)):
    """Cartesian mesh of nx-by-ny rectangles on an axis-aligned domain.

    `domain` is (x0, y0, x1, y1). Cell points sit at the rectangle centers
    (their barycenters).
    """
    if nx < 1 or ny < 1:
        raise MeshError("cell counts must be at least 1")
    x0, y0, x1, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate domain rectangle")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    verts = np.array([(x, y) for y in ys for x in xs])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1),
                          vid(i, j + 1)))
    return Mesh(verts, cells)


def build_triangular(nx, ny, cell_point_rule="barycenter", tensor=None,
                     domain=(0.0, 0.0, 1.0, 1.0)):
    """Triangular mesh: each rectangle of the nx-by-ny grid split in two.

    The split runs from the bottom-right to the top-left corner of each
    rectangle, so the two triangles of the first unit cell have barycenters
    (1/3, 1/3) and (2/3, 2/3). cell_point_rule selects barycenter,
    incenter, or lambda_incenter (the latter measures the incenter's edge
    weights in the metric of the inverse of `tensor`, a callable returning
    a 2x2 SPD matrix at a point).
    """
    if nx < 1 or ny < 1:
        raise MeshError("cell counts must be at least 1")
    x0, y0, x1, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate domain rectangle")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    verts = np.array([(x, y) for y in ys for x in xs])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            bl, br = vid(i, j), vid(i + 1, j)
            tr, tl = vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((bl, br, tl))
            cells.append((br, tr, tl))
    mesh = Mesh(verts, cells)
    if cell_point_rule == "barycenter":
        return mesh
    tensors = None
    if cell_point_rule == "lambda_incenter":
        if tensor is None:
            raise MeshError("lambda_incenter rule needs a tensor field")
        tensors = np.array([tensor(*mesh.cell_centroids[k])
                            for k in range(mesh.nc)])
    return mesh.with_cell_points(cell_point_rule, tensors)


def perturb_random(mesh, amplitude, seed):
    """Displace interior vertices by random offsets; boundary stays put.

    Each interior vertex moves by a uniformly random direction and radius,
    the radius bounded by amplitude times the shortest edge incident to the
    vertex. Cell points are recomputed as barycenters. amplitude must be in
    [0, 0.5); a perturbation that inverts a cell raises MeshError naming
    the cell.
    """
    if not 0.0 <= amplitude < 0.5:
        raise MeshError("amplitude must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, mesh.nv)
    radius = rng.uniform(0.0, 1.0, mesh.nv)
    shortest = np.full(mesh.nv, np.inf)
    for e in range(mesh.ne):
        a, b = mesh.edge_vertices[e]
        shortest[a] = min(shortest[a], mesh.edge_lengths[e])
        shortest[b] = min(shortest[b], mesh.edge_lengths[e])
    verts = mesh.vertices.copy()
    movable = ~mesh.vertex_is_boundary
    cap = amplitude * shortest[movable] * radius[movable]
    verts[movable, 0] += cap * np.cos(theta[movable])
    verts[movable, 1] += cap * np.sin(theta[movable])
    try:
        return Mesh(verts, mesh.cells)
    except MeshError as err:
        raise MeshError(f"perturbation rejected: {err}") from err


# -- mesh file IO -----------------------------------------------------------


def write_mesh(mesh, path):
    """Write a mesh as text: header "NV NC NE", vertex lines, cell lines."""
    lines = [f"{mesh.nv} {mesh.nc} {mesh.ne}"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    for loop in mesh.cells:
        lines.append(str(len(loop)) + " " + " ".join(str(v) for v in loop))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    """Read the text format written by write_mesh. '#' starts a comment."""
    tokens_by_line = []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens_by_line.append(line.split())
    if not tokens_by_line:
        raise MeshError(f"empty mesh file: {path}")
    header = tokens_by_line[0]
    if len(header) < 2:
        raise MeshError("mesh header must be 'NV NC NE'")
    nv, nc = int(header[0]), int(header[1])
    if len(tokens_by_line) < 1 + nv + nc:
        raise MeshError("mesh file truncated")
    verts = []
    for tok in tokens_by_line[1:1 + nv]:
        if len(tok) != 2:
            raise MeshError(f"bad vertex line: {' '.join(tok)}")
        verts.append((float(tok[0]), float(tok[1])))
    cells = []
    for tok in tokens_by_line[1 + nv:1 + nv + nc]:
        k = int(tok[0])
        if len(tok) != k + 1:
            raise MeshError(f"bad cell line: {' '.join(tok)}")
        cells.append(tuple(int(t) for t in tok[1:]))
    return Mesh(np.array(verts), cells)


# -- orthogonality test ------------------------------------------------------


def _ray_edge_intersection(origin, direction, edge_a, edge_b):
    """Intersect the line origin + t*direction with segment [a, b].

    Returns (t, s) where s parameterizes the segment, or None when the
    line and segment are parallel.
    """
    d = np.asarray(direction, float)
    e = edge_b - edge_a
    det = d[0] * (-e[1]) - d[1] * (-e[0])
    if abs(det) < 1e-300:
        return None
    rhs = edge_a - origin
    t = (rhs[0] * (-e[1]) + rhs[1] * e[0]) / det
    s = (d[0] * rhs[1] - d[1] * rhs[0]) / det
    return t, s


@dataclass
class OrthogonalityReport:
    """Per-edge orthogonality flags and the satisfied fraction."""

    edge_ok: np.ndarray
    fraction: float
    # co-normal ray intersection data, reused by two-point assembly:
    # per edge, per side: intersection point and distance from the cell
    # point along the co-normal ray (NaN where undefined)
    points: np.ndarray
    distances: np.ndarray


def check_orthogonality(mesh, tensors):
    """Check whether co-normal rays meet each edge at a common point.

    For each cell K incident to edge sigma, the co-normal ray leaves the
    cell point along Lambda_K n_{K, sigma}. An interior edge passes when
    both rays hit the segment and their intersection points coincide
    within 1e-10 |sigma|; a boundary edge passes when the (forward) ray
    hits the segment. `tensors` is an (nc, 2, 2) array or a single 2x2
    matrix used for every cell.
    """
    tensors = np.asarray(tensors, dtype=float)
    if tensors.shape == (2, 2):
        tensors = np.broadcast_to(tensors, (mesh.nc, 2, 2))
    edge_ok = np.zeros(mesh.ne, dtype=bool)
    points = np.full((mesh.ne, 2, 2), np.nan)
    distances = np.full((mesh.ne, 2), np.nan)
    stol = 1e-10
    for e in range(mesh.ne):
        a = mesh.vertices[mesh.edge_vertices[e, 0]]
        b = mesh.vertices[mesh.edge_vertices[e, 1]]
        hits = []
        ok = True
        for side in range(2):
            k = mesh.edge_cells[e, side]
            if k < 0:
                continue
            xk = mesh.cell_points[k]
            direction = tensors[k] @ mesh.outward_normal(k, e)
            res = _ray_edge_intersection(xk, direction, a, b)
            if res is None:
                ok = False
                continue
            t, s = res
            point = xk + t * direction
            points[e, side] = point
            distances[e, side] = np.hypot(*(point - xk))
            if t <= 0.0 or not -stol <= s <= 1.0 + stol:
                ok = False
            hits.append(point)
        if ok and len(hits) == 2:
            ok = np.hypot(*(hits[0] - hits[1])) <= stol * mesh.edge_lengths[e]
        edge_ok[e] = ok and len(hits) > 0
    return OrthogonalityReport(
        edge_ok=edge_ok,
        fraction=float(edge_ok.mean()),
        points=points,
        distances=distances,
    )


# -- diamonds (one per edge) -------------------------------------------------


@dataclass
class Diamond:
    """Quadrilateral spanned by an edge and the two adjacent cell points.

    For boundary edges the second cell point collapses onto the edge
    midpoint. n_primal is the unit normal of the edge pointing from K
    toward L; n_dual is the unit normal of the segment [x_K, x_L]
    oriented so that n_dual . (v2 - v1) > 0.
    """

    edge: int
    cell_k: int
    cell_l: int  # -1 for boundary diamonds
    v1: int
    v2: int
    x_k: np.ndarray
    x_l: np.ndarray  # cell point of L, or the edge midpoint on the boundary
    area: float
    n_primal: np.ndarray
    n_dual: np.ndarray
    d_primal: float  # |x_l - x_k|
    d_dual: float    # |v2 - v1|


class DiamondSet:
    """One diamond per mesh edge, indexed like the edges."""

    def __init__(self, diamonds, total_area):
        self.diamonds = tuple(diamonds)
        self.total_area = total_area

    def __getitem__(self, e):
        return self.diamonds[e]

    def __len__(self):
        return len(self.diamonds)

    def __iter__(self):
        return iter(self.diamonds)


def build_diamonds(mesh):
    """Build the diamond around every edge.

    The diamond area is the sum of the two triangles the edge forms with
    the adjacent cell points; it must match the parallelogram formula
    |det(x_L - x_K, v2 - v1)| / 2, which is what makes the diamond
    gradient exact on affine functions. A mismatch (cell point on the
    wrong side of the edge) or a zero area raises MeshError naming the
    edge.
    """
    diamonds = []
    total = 0.0
    areatol = DEGENERATE_RTOL * mesh._scale ** 2
    for e in range(mesh.ne):
        va, vb = mesh.edge_vertices[e]
        a, b = mesh.vertices[va], mesh.vertices[vb]
        k = int(mesh.edge_cells[e, 0])
        l = int(mesh.edge_cells[e, 1])
        xk = mesh.cell_points[k]
        xl = mesh.edge_midpoints[e] if l < 0 else mesh.cell_points[l]
        tri_k = abs(polygon_area([a, b, xk]))
        tri_l = 0.0 if l < 0 else abs(polygon_area([a, b, xl]))
        area = tri_k + tri_l
        e1 = xl - xk
        e2 = b - a
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if area <= areatol:
            raise MeshError(f"diamond of edge {e} has zero area")
        if abs(area - 0.5 * abs(det)) > 1e-9 * area:
            raise MeshError(
                f"diamond of edge {e} is inverted (cell points do not "
                "straddle the edge)"
            )
        n_primal = mesh.edge_normals[e].copy()  # out of cell k, toward l
        if np.dot(n_primal, e1) <= 0.0 and l >= 0:
            raise MeshError(
                f"edge {e}: cell point of cell {l} lies on the wrong side"
            )
        n_dual = rot90(e1) / max(np.hypot(*e1), 1e-300)
        if np.dot(n_dual, e2) < 0.0:
            n_dual = -n_dual
        diamonds.append(Diamond(
            edge=e, cell_k=k, cell_l=l, v1=int(va), v2=int(vb),
            x_k=xk.copy(), x_l=np.array(xl, float), area=area,
            n_primal=n_primal, n_dual=n_dual,
            d_primal=float(np.hypot(*e1)), d_dual=float(np.hypot(*e2)),
        ))
        total += area
    dset = DiamondSet(diamonds, total)
    if abs(total - mesh.domain_area) > 1e-12 * mesh.domain_area:
        raise MeshError(
            f"diamonds do not tile the domain: {total} vs {mesh.domain_area}"
        )
    return dset


# -- interaction regions (one per vertex) -------------------------------------


@dataclass
class SubCell:
    """Corner of a cell at a vertex, with gradient geometry.

    edges = (e_a, e_b) are the two edges of the cell meeting at the
    vertex; nu = (nu_a, nu_b) are normals to the segments from the cell
    point to the respective edge midpoints, scaled to those segments'
    lengths and pointing out of the triangle (x_K, midpoint_a,
    midpoint_b) whose area is tri_area. quad_area is the area of the
    quadrilateral (x_K, midpoint_a, v, midpoint_b).
    """

    cell: int
    vertex: int
    edges: tuple
    nu: tuple
    tri_area: float
    quad_area: float

    def gradient_coefficients(self):
        """Coefficients (c_k, c_a, c_b) so that the sub-cell gradient of a
        field with value u_K at the cell point and u_a, u_b at the two edge
        midpoints is c_k u_K + c_a u_a + c_b u_b (each c a 2-vector)."""
        nu_a, nu_b = self.nu
        f = -0.5 / self.tri_area
        c_a = f * nu_b
        c_b = f * nu_a
        c_k = -(c_a + c_b)
        return c_k, c_a, c_b


class InteractionRegionSet:
    """Per-vertex groups of sub-cells used by multi-point flux schemes."""

    def __init__(self, regions):
        self.regions = tuple(regions)  # regions[v] = tuple of SubCell

    def __getitem__(self, v):
        return self.regions[v]

    def __len__(self):
        return len(self.regions)


def build_interaction_regions(mesh):
    """Build the sub-cell geometry around every vertex.

    Raises MeshError when a sub-cell's (cell point, edge midpoint, edge
    midpoint) triangle is degenerate.
    """
    regions = []
    for v in range(mesh.nv):
        subs = []
        for k in mesh.vertex_cells[v]:
            e_a, e_b = mesh.cell_edges_at_vertex(k, v)
            xk = mesh.cell_points[k]
            ma = mesh.edge_midpoints[e_a]
            mb = mesh.edge_midpoints[e_b]
            tri = 0.5 * abs(
                (ma - xk)[0] * (mb - xk)[1] - (ma - xk)[1] * (mb - xk)[0]
            )
            if tri <= DEGENERATE_RTOL * mesh._scale ** 2:
                raise MeshError(
                    f"degenerate sub-cell at vertex {v} in cell {k}: "
                    "cell point and edge midpoints are collinear"
                )
            nus = []
            mids = (ma, mb)
            for t, other in ((ma, mb), (mb, ma)):
                nu = rot90(t - xk)
                if np.dot(nu, other - xk) > 0.0:
                    nu = -nu
                nus.append(nu)
            quad = abs(polygon_area([xk, ma, mesh.vertices[v], mb]))
            subs.append(SubCell(
                cell=int(k), vertex=int(v), edges=(int(e_a), int(e_b)),
                nu=(nus[0], nus[1]), tri_area=tri, quad_area=quad,
            ))
        regions.append(tuple(subs))
    return InteractionRegionSet(regions)

"""Common scheme contract: dof layouts, assembled systems, flux recovery.

Every linear scheme produces an AssembledSystem: a sparse linear system,
a layout describing what each row/column means (cell, interior edge, or
interior vertex unknowns), fixed boundary values, and a flux table that
expresses every one-sided flux F_{K, sigma} as a linear form over dof
values (free and boundary alike). Solving and flux recovery are then
scheme-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..sparse_linalg import LinearSystem, solve


class SchemeError(Exception):
    """Raised when a scheme's preconditions or invariants fail."""


class OrthogonalityError(SchemeError):
    """A two-point scheme was asked to run on a non-orthogonal mesh."""

    def __init__(self, message, edges):
        super().__init__(message)
        self.edges = tuple(int(e) for e in edges)


class DofLayout:
    """Ordered free unknowns plus the disjoint set of boundary identities.

    Dof identities are tuples: ("cell", k), ("edge", e), ("vertex", v).
    Free identities get matrix rows in order; boundary identities carry
    fixed values and never appear as rows.
    """

    def __init__(self, free_ids, boundary_ids=()):
        self.free_ids = tuple(free_ids)
        self.boundary_ids = tuple(boundary_ids)
        self.index = {d: i for i, d in enumerate(self.free_ids)}
        if len(self.index) != len(self.free_ids):
            raise SchemeError("duplicate free dof identities")
        overlap = set(self.free_ids) & set(self.boundary_ids)
        if overlap:
            raise SchemeError(f"dofs both free and boundary: {overlap}")

    @property
    def n(self):
        return len(self.free_ids)

    def row(self, dof):
        return self.index[dof]

    def is_free(self, dof):
        return dof in self.index

    def rows_of_kind(self, kind):
        return [i for i, d in enumerate(self.free_ids) if d[0] == kind]


def dof_location(mesh, dof):
    """Geometric point a dof value refers to."""
    kind, i = dof
    if kind == "cell":
        return mesh.cell_points[i]
    if kind == "edge":
        return mesh.edge_midpoints[i]
    if kind == "vertex":
        return mesh.vertices[i]
    raise SchemeError(f"unknown dof kind: {kind!r}")


@dataclass
class SolutionField:
    """Values of the free unknowns plus the fixed boundary values."""

    layout: DofLayout
    values: np.ndarray
    boundary_values: dict

    def get(self, dof):
        if self.layout.is_free(dof):
            return float(self.values[self.layout.row(dof)])
        return float(self.boundary_values[dof])

    def cell_values(self, mesh):
        out = np.empty(mesh.nc)
        for k in range(mesh.nc):
            out[k] = self.get(("cell", k))
        return out

    def full_vector(self):
        return self.values.copy()


@dataclass
class AssembledSystem:
    """Linear scheme output: system + layout + flux table + metadata.

    flux_map[(K, e)] is a tuple of (dof identity, coefficient) pairs; the
    one-sided flux through edge e out of cell K is the corresponding
    linear combination of dof values. Every (K, e in edges of K) pair is
    present.
    """

    scheme: str
    mesh: object
    system: LinearSystem
    layout: DofLayout
    boundary_values: dict
    flux_map: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in range(self.mesh.nc):
            for e in self.mesh.cell_edges[k]:
                if (k, e) not in self.flux_map:
                    raise SchemeError(
                        f"flux operator misses cell {k}, edge {e}"
                    )

    def solve(self, method="auto"):
        x = solve(self.system, method=method)
        return SolutionField(layout=self.layout, values=x,
                             boundary_values=dict(self.boundary_values))

    def field_from_vector(self, x):
        return SolutionField(layout=self.layout,
                             values=np.asarray(x, dtype=float),
                             boundary_values=dict(self.boundary_values))

    def interpolate(self, fn):
        """SolutionField with fn evaluated at every free dof location."""
        vals = np.array(
            [fn(*dof_location(self.mesh, d)) for d in self.layout.free_ids]
        )
        return self.field_from_vector(vals)


def recover_fluxes(assembled, solution):
    """Evaluate the flux table at a solution: {(cell, edge): F_{K, edge}}."""
    if solution.layout is not assembled.layout:
        raise SchemeError("solution does not belong to this system")
    out = {}
    for key, terms in assembled.flux_map.items():
        out[key] = sum(c * solution.get(d) for d, c in terms)
    return out

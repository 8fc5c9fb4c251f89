"""Finite-volume scheme implementations sharing the AssembledSystem API."""

from .base import (  # noqa: F401
    AssembledSystem,
    DofLayout,
    OrthogonalityError,
    SchemeError,
    SolutionField,
    dof_location,
    recover_fluxes,
)
from .ddfv import (  # noqa: F401
    DiamondData,
    DualMesh,
    assemble_ddfv,
    build_diamond_data,
    build_dual_mesh,
    diamond_gradient,
    recover_ddfv_fluxes,
)
from .hmm import (  # noqa: F401
    LocalHmmCell,
    assemble_hmm,
    build_local_cell,
    build_stabilization,
    cell_gradient,
    recover_hmm_fluxes,
)
from .mpfa import assemble_mpfa_l, assemble_mpfa_o, subcell_gradient  # noqa: F401
from .nonlinear import (  # noqa: F401
    FrozenFluxAssembly,
    VertexInterpolator,
    apply_nonlinear_correction,
    build_vertex_interpolator,
    cone_flux_coefficients,
    frozen_mmp,
    frozen_monotone_polygonal,
    frozen_monotone_triangular,
    mmp_combination_weights,
    solve_nonlinear,
    triangle_flux_coefficients,
)
from .tpfa import EdgeGeometry, assemble_tpfa, tpfa_transmissibility  # noqa: F401

"""Finite-volume schemes for anisotropic diffusion on polygonal meshes.

The package provides, side by side, the classical two-point scheme, two
multi-point flux families, a hybrid mimetic scheme, a discrete-duality
scheme, nonlinear monotone and extremum-preserving schemes, and a
nonlinear correction that upgrades a linear scheme to one with a discrete
minimum principle. Diagnostics verify the structural properties each
scheme claims (M-matrix, SPD, conservativity, exactness on affine
solutions, discrete extremum bounds) on distorted meshes.
"""

__version__ = "0.1.0"

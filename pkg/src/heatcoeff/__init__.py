"""Heat-trace coefficient density for nonminimal Laplace-type operators.

Evaluates the second heat coefficient density R2 of operators whose principal
symbol is a metric times a positive matrix u, in every closed form the theory
provides (raw spectral-function assembly, dimension-specialized branches,
minimal and conformal-like reductions), applies it to rational
noncommutative-torus conformal geometry, and verifies the results against an
independent Fourier-Galerkin heat-trace oracle.
"""

__version__ = "0.1.0"

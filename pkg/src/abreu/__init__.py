"""Penalized fourth-order approximation of convexity-constrained minimizers.

Library layout:

- ``geometry``      nested convex domains, masked grids, fields, the barrier mu_eps
- ``calculus``      difference operators, Hessians, cofactors, convexity certificates
- ``lagrangian``    split Lagrangians, the penalized functional and its gradient
- ``ma_solver``     Dirichlet Monge-Ampere solver (damped Newton)
- ``lma_solver``    cofactor-weighted linear Dirichlet solver
- ``abreu_solver``  the coupled second boundary value problem, eps-continuation
- ``oracle``        direct constrained minimization (ground truth)
- ``sections``      section geometry, John normalization, twist gauges, Harnack data
- ``reporting``     experiment orchestration, CSV artifacts
- ``plots``         matplotlib report figures
- ``cli``           command-line entry point
"""

from .geometry import (ConvexDomain, NestedDomains, Grid, ScalarField,
                       build_grid, disk, ellipse, nested_disks,
                       mu_epsilon, extend_boundary_data)
from .calculus import (MatrixField, ConvexityCertificate, hessian, gradient,
                       det_cofactor, certify_convexity, momentum_divergence)
from .lagrangian import (Lagrangian, rochet_chone, validate_assumptions,
                         assemble_f_epsilon, evaluate_J, first_variation_J)

__version__ = "0.1.0"

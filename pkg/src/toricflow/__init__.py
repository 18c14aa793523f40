"""toricflow: Kahler-Ricci flow, Perelman entropy and soliton invariants on
toric Fano manifolds, reduced to moment-polytope and log-coordinate grids."""

__version__ = "0.1.0"

from .polytope import (Polytope, PolytopeError, load_polytope, catalog,
                       catalog_names, polytope_volume,
                       weighted_moment_integrals, MomentIntegralReport)
from .fields import (TorusField, theta_normalizer, make_torus_field,
                     invariant_N, extremal_field, h_exact, futaki_exact,
                     futaki_modified, h_functional, obstruction_report,
                     InvariantReport, SolverError)
from .grid import (PotentialGrid, GridError, reference_potential,
                   canonical_potential, ReferencePotential,
                   perturbation_profile, project_convex)
from .snapshot import (MetricSnapshot, SnapshotError, assemble_snapshot,
                       integrate, gradient_sq, laplacian, w_bound_check)

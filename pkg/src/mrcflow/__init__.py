"""Two-phase incompressible flow on structured grids with multiscale Robin-coupled pressure
solves, implicit upwind transport and trust-region Newton variants."""

__version__ = "0.1.0"

from .mesh import CartesianGrid, FaceField, build_decomposition, build_grid, divergence  # noqa: F401
from .rock_fluids import FluidProps, fractional_flow, gen_gaussian_field  # noqa: F401
from .darcy import BoundarySpec, solve_darcy  # noqa: F401
from .newton import NewtonConfig, newton_solve  # noqa: F401
from .coupling import FlowProblem, SFIConfig, SIConfig, run  # noqa: F401

"""rieszlab: periodic Riesz interactions, their mean-field PDE and particle systems."""
from .errors import (BlowUpError, DomainError, FitError, ParameterError, ResolutionError, RieszLabError,
                     SingularityError)
from .grid import GridField, heat_semigroup, lp_norm, sobolev_seminorm
from .riesz import (PotentialTable, RieszParams, build_table, eval_g, eval_grad_g, fractional_laplacian,
                    riesz_constant, riesz_fourier_coeff, synthesize_g, truncated_g)

__version__ = "0.1.0"

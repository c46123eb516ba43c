"""Diagonal and scalar expectation propagation for GLMs, with free-probability checks."""
from .errors import (BenchConfigError, ConfigError, DegenerateSpectrum, DimensionMismatch, FreeEPError,
                     InvalidParameter, NoBracket, NonFinite, NotConverged, NotPowerOfTwo, OutOfDomain,
                     ParseError, PoleHit, RaggedRows, SingularMatrix, UnmappableLabel, ZeroDiagonal, ZeroMass,
                     ZeroMean)
from .model import (EpState, GaussianLikelihood, GaussianPrior, GlmProblem, InitConfig, PosteriorSummary,
                    ProbitLikelihood, SpikeSlabPrior, init_state, validate_problem)
from .solver_diag import SolverConfig, ep_sweep_diagonal, fixed_point_residuals, solve_diagonal
from .solver_scalar import ep_sweep_scalar, lambda2_from_spectrum, precompute_svd, solve_scalar
from .freeprob import EmpiricalSpectrum, freeness_score, r_transform, s_transform, stieltjes, stieltjes_inverse

__version__ = "0.1.0"

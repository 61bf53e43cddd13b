"""Ergodic control of pure-jump processes and their diffusive-limit approximation."""

from .errors import (CFLError, ConfigError, ContractError, ConvergenceError, LinearSolveError,
                     NegativeProbabilityError, NumericalError, QuadratureError, SimulationError)
from .grid import Grid, build_kernel, check_cfl, fd_apply, make_grid, transition_row
from .model import DiffusionModel, JumpModel, NoiseLaw, auction_v1, diffusion_limit, model_preset
from .policy import (MollifiedValue, extract_control_smooth, extracted_policy, make_mollifier, mollified_derivs,
                     project_policy)
from .simulate import (SimConfig, check_assumptions, delta_r_residual, delta_r_table, estimate_rho,
                       simulate_path)
from .solvers import (ControlGrid, ErgodicSolution, correction_solve, estimate_empirical_kernels,
                      policy_evaluate, policy_iterate, rvi_solve)

__version__ = "0.1.0"

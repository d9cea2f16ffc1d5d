"""MC+ penalized regression with selective-scaling escape steps."""

from ..data import RegressionProblem
from .penalty import PenaltyMC, cd_update, hard_threshold, mcp_penalty, mcp_penalty_deriv, soft_threshold
from .regression import (CDResult, CorrelationSets, all_sets, coordinate_descent, correlation_set,
                         lambda_max, mcp_penalty_sum, objective)
from .selective import (CASES, CaseSpec, Subproblem, VInterval, build_case_specs, build_subproblem,
                        enumerate_candidates, partition_intervals, scaling_escape_sweep,
                        selective_scaling_step, solve_subproblem, solve_v_on_interval)
from .simulate import ar1_covariance, ar1_design, m1_coefficients, m1_noise_sd, simulate_M1
from .surfaces import (SurfaceSet, fit_point, fit_surfaces, gamma_halves, make_grid, pct_delta,
                       pct_delta_e, pct_delta_L, summarize, summarize_block, surface_errors,
                       var_sel_error)

"""Exact and sampled multi-step off-policy operators for tabular MDPs, centred on Peng's Q(lambda)."""
from .mdp import (
    TabularMdp,
    bellman,
    bellman_opt,
    greedy,
    greedy_set,
    greedy_tie_split,
    kernel_backup,
    mix_policies,
    optimal_q,
    policy_backup,
    policy_q,
    policy_v,
    sup_dist,
    value_iteration,
)
from .operators import (
    ResolventSolveSpec,
    TraceConfig,
    ctrace_alpha,
    general_retrace_op,
    lambda_return_op,
    n_step_op,
    pql_op,
    pql_series,
    uncorrected_n_step_op,
    validate_conservative,
)
from .solvers import HarutyunyanQSolver, PengQSolver, TabularLearner

__version__ = "0.1.0"

__all__ = [
    "TabularMdp",
    "bellman",
    "bellman_opt",
    "greedy",
    "greedy_set",
    "greedy_tie_split",
    "kernel_backup",
    "mix_policies",
    "optimal_q",
    "policy_backup",
    "policy_q",
    "policy_v",
    "sup_dist",
    "value_iteration",
    "ResolventSolveSpec",
    "TraceConfig",
    "ctrace_alpha",
    "general_retrace_op",
    "lambda_return_op",
    "n_step_op",
    "pql_op",
    "pql_series",
    "uncorrected_n_step_op",
    "validate_conservative",
    "HarutyunyanQSolver",
    "PengQSolver",
    "TabularLearner",
    "__version__",
]

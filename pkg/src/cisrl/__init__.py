"""Off-policy evaluation in finite MDPs with conditional importance sampling.

Estimators weight off-policy targets by conditional expectations of the
trajectory importance ratio: alongside ordinary and per-decision importance
sampling, this gives return-conditioned and state-conditioned estimators
with exact (enumeration-backed) or online (regression-backed) weights, plus
the exact oracle and the experiment harness that exercises them on a chain
benchmark.
"""
from ._kernels import BACKEND
from .environments import ChainSpec, build_chain, random_dirichlet_policy, random_q_function
from .errors import ConfigError, EnumerationCapError, MissingWeightError, SupportViolationError
from .estimators import (
    Conditioner,
    EstimatorScheme,
    OnlineWeightProvider,
    OracleWeightProvider,
    conditional_estimate,
    ois_estimate,
    parse_scheme,
    pdis_estimate,
)
from .exact import (
    ConditionalWeightTable,
    EnumeratedDistribution,
    enumerate_trajectories,
    estimator_moments,
    exact_conditional_weight,
    exact_operator,
    quantize,
    return_distribution,
    solve_q_pi,
    state_marginal,
)
from .harness import (
    ExperimentConfig,
    RunResult,
    bootstrap_ci,
    default_config,
    run_operator_estimation,
    run_policy_evaluation_experiment,
    write_csv,
)
from .learning import TabularQ, TileCodedQ, apply_update, q_value, run_policy_evaluation
from .mdp import (
    Mdp,
    Policy,
    Trajectory,
    bootstrapped_return,
    check_support_condition,
    importance_ratio,
    load_mdp,
    mix_policies,
    sample_trajectory,
    save_mdp,
    truncated_return,
)
from .regression import WeightStore, fit_batch
from .rng import make_rng

__version__ = "0.1.0"

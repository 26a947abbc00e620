"""Off-policy evaluation in layered finite-horizon MDPs by moment-matched reweighting.

Q-MMR learns one scalar weight per trajectory and level, top-down, so that
reweighted state-action pairs match the policy-shifted pairs of the previous
level against a discriminator class. Linear and tabular classes have closed
forms; any class closed under negation can use the no-regret solver.
"""
from .baselines import FqeSolution, fqe_linear, fqe_tabular, importance_sampling
from .datasets import (
    EmpiricalMDP, TrajectoryDataset, build_empirical_mdp, concatenate, empirical_expectation,
    load_jsonl, save_csv, save_jsonl,
)
from .diagnostics import (
    PopulationDiagnostics, PopulationWeights, check_completeness, compute_feature_dynamics,
    coverage_norms, inf_operator_norm, leverage_constant, mis_ratio_exact,
    population_weights_linear, realizability_residual, rho_exact_tabular, rho_upper_bound,
    tracking_error,
)
from .errors import ValidationError
from .function_classes import (
    FeatureMap, LinearClass, TabularClass, best_response_linear, gram_matrix, target_moment,
)
from .generators import FixtureShape, generate_mdp
from .matching import (
    BoundTerms, MinimaxConfig, OpeEstimate, WeightMatrix, error_bound, estimate_return,
    matching_loss, run_qmmr, second_moment, solve_level_linear, solve_level_minimax,
    solve_level_tabular, telescoped_sum,
)
from .mdp import (
    LayeredMDP, Policy, RewardNoise, deterministic_policy, epsilon_mix, exact_occupancy,
    exact_q, exact_return, mdp_from_dict, mdp_to_dict, policy_from_dict, policy_to_dict,
    return_from_occupancy, sample_trajectories, softmax_policy, uniform_policy,
)

__version__ = "0.1.0"

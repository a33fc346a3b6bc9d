"""Minimum-variance augmentation logging for off-policy evaluation.

Given an existing log collected under one policy and a budget of new samples,
choose the policy that collects the new samples so that the balanced
(mixture-weighted) estimate of a target policy's value has the smallest
variance.
"""
from .core import (
    Environment,
    LoggedDataset,
    MixProfile,
    Policy,
    SecondMomentModel,
    fit_second_moment,
    mix_policies,
    second_moment,
    true_utility,
    uniform_policy,
    uniform_second_moment,
    validate_policy,
)
from .estimators import (
    EstimateReport,
    ExactMoments,
    VarianceReport,
    balanced_estimate,
    balanced_variance_closed_form,
    balanced_variance_stratified,
    empirical_variance,
    exact_estimator_moments,
    ips_estimate,
    ips_variance_closed_form,
    single_term_variance,
)
from .exceptions import MVALError
from .learner import (
    BalancedERM,
    LearnerParams,
    PrecomputedMVAL,
    cross_features,
    erm_balanced_fit,
    featurize,
    op2_objective,
    policy_from_params,
    precomputed_mval_fit,
)
from .policyclass import (
    FiniteClass,
    PiMaxEnvelope,
    TrustRegion,
    mval_solve_multi,
    pi_max,
    pi_max_finite,
    pi_max_trust_region,
    variance_bound,
)
from .sim import (
    PolicyGenConfig,
    SweepConfig,
    TrialReport,
    derive_target,
    generate_scored_policy,
    make_synthetic_problem,
    rejection_sample,
    run_multi_trials,
    run_sweep,
    run_variance_trials,
    sample_logged_data,
)
from .solver import (
    ContextWeights,
    MVALAugmenter,
    SolverDiagnostics,
    large_alpha_closed_form,
    minvar_ips_policy,
    mval_grid_oracle,
    mval_objective,
    mval_policy,
    mval_solve_context,
    variance_decrease_single_sample,
)

__version__ = "0.1.0"

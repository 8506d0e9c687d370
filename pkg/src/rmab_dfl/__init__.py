"""Decision-focused learning toolkit for restless multi-armed bandits.

Predict per-beneficiary transition dynamics from features, plan budgeted
interventions, and train the predictors end-to-end through a
differentiable decomposed policy-optimization layer.
"""

__version__ = "0.1.0"

from .mdp import (
    CapacityError,
    DiscountedSetup,
    NumericError,
    PerArmPolicy,
    RewardSpec,
    TransitionTensor,
    WhittleTable,
    enumerate_policies,
    engagement_rewards,
    get_budget_usage,
    get_returns,
    returns_gradient,
    batched_policy_returns,
    uniform_setup,
    whittle_index,
)
from .dec_layer import (
    DualSolution,
    InfeasibleBudgetError,
    RegularizerConfig,
    ReturnsTable,
    SolverConfig,
    backward_pass,
    build_returns_table,
    dec_dfl_loss,
    eval_lambda,
    forward_pass,
    mixture_at,
    solve_reference,
)
from .planning import (
    Cohort,
    DecomposedPolicy,
    FixedPerArmPolicy,
    SimulationResult,
    WhittleTopB,
    brute_force_joint,
    budget_audit,
    simulate_joint,
    uncorrected_policy,
    whittle_top_b_step,
)
from .datasets import (
    Dataset,
    DatasetManifest,
    TrajectoryData,
    discretize_engagement,
    estimate_from_trajectories,
    generate_synthetic,
    load_dataset,
    save_dataset,
    trajectory_data,
)
from .learning import (
    Adam,
    DatasetSplits,
    DQReport,
    LossSpec,
    ModelSpec,
    PredictiveModel,
    TrainingConfig,
    evaluate_dq,
    grid_search,
    mse_loss,
    nll_loss,
    predict,
    sim_dfl_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]

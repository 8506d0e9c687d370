"""Joint-policy planning and evaluation.

Whittle top-B action selection, Monte Carlo rollouts of joint policies,
the uncorrected decomposed relaxation (budget checked on predictions,
kept to demonstrate how it overshoots), a brute-force product-space
solver for tiny instances, and the budget audit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .dec_layer import (
    DualSolution,
    RegularizerConfig,
    ReturnsTable,
    SolverConfig,
    forward_pass,
)
from .mdp import (
    BUDGET,
    ENGAGEMENT,
    CapacityError,
    DiscountedSetup,
    RewardSpec,
    TransitionTensor,
    WhittleTable,
    batched_policy_returns,
    engagement_rewards,
    policy_action_matrix,
)

MAX_JOINT_STATES = 4096


@dataclass(frozen=True)
class Cohort:
    """A set of arms sharing a budget and discounting setup."""

    features: np.ndarray  # (N, d)
    tensors: np.ndarray  # (N, S, 2, S) true transitions
    budget: float
    setup: DiscountedSetup

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        object.__setattr__(self, "tensors", np.asarray(self.tensors, dtype=float))
        if not 0 < self.budget <= self.num_arms:
            raise ValueError(f"budget must lie in (0, N={self.num_arms}]")

    @property
    def num_arms(self) -> int:
        return self.tensors.shape[0]

    @property
    def num_states(self) -> int:
        return self.tensors.shape[1]


@dataclass(frozen=True)
class WhittleTopB:
    """Joint policy: act on the B arms with the largest current-state indices."""

    tables: list[WhittleTable]
    budget: int
    act_on_nonpositive: bool = True


@dataclass(frozen=True)
class DecomposedPolicy:
    """Joint policy: each trajectory samples one per-arm policy per arm from Z."""

    z: np.ndarray  # (N, 2^S)


@dataclass(frozen=True)
class FixedPerArmPolicy:
    """Joint policy: a fixed deterministic per-arm policy index for every arm."""

    policy_indices: np.ndarray  # (N,)


@dataclass(frozen=True)
class SimulationResult:
    mean_return: float
    std_error: float
    mean_budget_used: float
    trajectories_used: int


def whittle_top_b_step(
    indices: list[WhittleTable],
    states: np.ndarray,
    budget: int,
    act_on_nonpositive: bool = True,
) -> np.ndarray:
    """Action vector acting on the top-B current-state Whittle indices.

    Ties at the B-th rank resolve toward the lowest arm id.
    """
    n = len(indices)
    scores = np.array([indices[i].wi[states[i]] for i in range(n)])
    return _top_b_actions(scores, min(budget, n), act_on_nonpositive)


def _top_b_actions(scores: np.ndarray, budget: int, act_on_nonpositive: bool) -> np.ndarray:
    n = scores.shape[0]
    actions = np.zeros(n, dtype=int)
    if budget >= n:
        chosen = np.arange(n)
    else:
        # stable sort on (-score, arm id): lowest id wins ties
        chosen = np.argsort(-scores, kind="stable")[:budget]
    if not act_on_nonpositive:
        chosen = chosen[scores[chosen] > 0]
    actions[chosen] = 1
    return actions


def simulation_horizon(setup: DiscountedSetup, num_arms: int, r_max: float = 1.0) -> int:
    """Steps until the discounted tail is below horizon_tol of total mass."""
    gamma = setup.gamma
    tail_cap = setup.horizon_tol
    horizon = int(np.ceil(np.log(tail_cap * (1 - gamma) / max(r_max * num_arms, 1e-12)) / np.log(gamma)))
    return max(horizon, 1)


def simulate_joint(
    cohort: Cohort, policy, trajectories: int, seed: int
) -> SimulationResult:
    """Monte Carlo estimate of the joint discounted return on true dynamics.

    Vectorized over trajectories; deterministic for a fixed seed.
    """
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    rng = np.random.default_rng(seed)
    n, num_states = cohort.num_arms, cohort.num_states
    setup = cohort.setup
    horizon = simulation_horizon(setup, n)
    rewards = engagement_rewards(num_states)
    cum_trans = np.cumsum(cohort.tensors, axis=-1)  # (N, S, 2, S)

    states = rng.choice(num_states, size=(trajectories, n), p=setup.initial_dist)
    if isinstance(policy, DecomposedPolicy):
        action_matrix = policy_action_matrix(num_states)
        # one deterministic per-arm policy per trajectory (mixture semantics)
        policy_draws = np.empty((trajectories, n), dtype=int)
        for i in range(n):
            policy_draws[:, i] = rng.choice(
                policy.z.shape[1], size=trajectories, p=policy.z[i] / policy.z[i].sum()
            )
    elif isinstance(policy, FixedPerArmPolicy):
        action_matrix = policy_action_matrix(num_states)
        policy_draws = np.broadcast_to(policy.policy_indices, (trajectories, n))
    elif isinstance(policy, WhittleTopB):
        wi = np.stack([t.wi for t in policy.tables])  # (N, S)
    else:
        raise TypeError(f"unknown joint policy {type(policy).__name__}")

    returns = np.zeros(trajectories)
    budget_used = np.zeros(trajectories)
    discount = 1.0
    arm_idx = np.arange(n)[None, :]
    for _ in range(horizon):
        if isinstance(policy, WhittleTopB):
            scores = wi[arm_idx, states]  # (traj, N)
            actions = _whittle_actions_batch(
                scores, policy.budget, policy.act_on_nonpositive
            )
        else:
            actions = action_matrix[policy_draws, states]
        returns += discount * rewards[states].sum(axis=1)
        budget_used += discount * actions.sum(axis=1)
        u = rng.random(size=states.shape)
        cdf = cum_trans[arm_idx, states, actions, :]  # (traj, N, S)
        states = np.minimum((u[..., None] > cdf).sum(axis=-1), num_states - 1)
        discount *= setup.gamma
    mean = float(returns.mean())
    se = float(returns.std(ddof=1) / np.sqrt(trajectories)) if trajectories > 1 else 0.0
    return SimulationResult(
        mean_return=mean,
        std_error=se,
        mean_budget_used=float(budget_used.mean()),
        trajectories_used=trajectories,
    )


def _whittle_actions_batch(
    scores: np.ndarray, budget: int, act_on_nonpositive: bool
) -> np.ndarray:
    """Top-B per row of a (traj, N) score matrix, stable in arm id."""
    traj, n = scores.shape
    actions = np.zeros((traj, n), dtype=int)
    b = min(budget, n)
    if b >= n:
        if act_on_nonpositive:
            return np.ones((traj, n), dtype=int)
        return (scores > 0).astype(int)
    order = np.argsort(-scores, axis=1, kind="stable")
    chosen = order[:, :b]
    rows = np.repeat(np.arange(traj), b)
    cols = chosen.reshape(-1)
    if act_on_nonpositive:
        actions[rows, cols] = 1
    else:
        keep = scores[rows, cols] > 0
        actions[rows[keep], cols[keep]] = 1
    return actions


def uncorrected_policy(
    pred: np.ndarray,
    cfg: SolverConfig,
    setup: DiscountedSetup,
    reg: RegularizerConfig | None = None,
) -> DualSolution:
    """Decomposed solve with the budget usage evaluated on *predicted*
    transitions. Exists to reproduce the budget-overshoot failure mode;
    never use it for training.
    """
    if reg is None:
        reg = RegularizerConfig(kind="entropy", alpha=1e-3)
    pred = _as_array(pred)
    reward = RewardSpec(ENGAGEMENT)
    j_pred = batched_policy_returns(pred, reward, setup)
    j_budget_pred = batched_policy_returns(pred, RewardSpec(BUDGET), setup)
    tables = ReturnsTable(j_pred=j_pred, j_true=j_pred, j_budget=j_budget_pred)
    return forward_pass(tables, reg, cfg)


def budget_audit(cohort: Cohort, sol: DualSolution, per_step: bool = False) -> float:
    """Ratio of true-transition budget usage to the available budget.

    By default the denominator is the discounted cap B/(1-gamma), so a
    feasible corrected solution audits at <= 1. With per_step=True the
    denominator is the per-step budget B, the overshoot factor quoted for
    the mismatched-prediction failure case.
    """
    j_budget_true = batched_policy_returns(
        cohort.tensors, RewardSpec(BUDGET), cohort.setup
    )
    used = float(np.sum(sol.z_star * j_budget_true))
    denom = cohort.budget if per_step else cohort.budget / (1.0 - cohort.setup.gamma)
    return used / denom


def brute_force_joint(cohort: Cohort, budget: int) -> tuple[float, dict]:
    """Exact optimal joint deterministic stationary policy on the product
    state space with the per-state constraint sum_i a_i <= B.

    Value iteration to residual 1e-10. Only for tiny instances.
    """
    n, num_states = cohort.num_arms, cohort.num_states
    joint_states = num_states ** n
    if joint_states > MAX_JOINT_STATES:
        raise CapacityError(f"product state space {joint_states} exceeds {MAX_JOINT_STATES}")
    gamma = cohort.setup.gamma
    rewards = engagement_rewards(num_states)
    state_tuples = list(itertools.product(range(num_states), repeat=n))
    actions_feasible = [
        a for a in itertools.product((0, 1), repeat=n) if sum(a) <= budget
    ]
    # joint transition per (state, action): product of per-arm rows
    reward_vec = np.array([sum(rewards[s] for s in st) for st in state_tuples])
    trans = np.empty((len(actions_feasible), joint_states, joint_states))
    for ai, act in enumerate(actions_feasible):
        for si, st in enumerate(state_tuples):
            rows = [cohort.tensors[i, st[i], act[i], :] for i in range(n)]
            joint = rows[0]
            for r in rows[1:]:
                joint = np.outer(joint, r).reshape(-1)
            trans[ai, si, :] = joint
    V = np.zeros(joint_states)
    for _ in range(10_000_000):
        Q = reward_vec[None, :] + gamma * (trans @ V)
        V_next = Q.max(axis=0)
        if np.max(np.abs(V_next - V)) < 1e-10:
            V = V_next
            break
        V = V_next
    best_actions = Q.argmax(axis=0)
    init = cohort.setup.initial_dist
    joint_init = init
    for _ in range(n - 1):
        joint_init = np.outer(joint_init, init).reshape(-1)
    value = float(joint_init @ V)
    policy = {
        state_tuples[si]: actions_feasible[best_actions[si]] for si in range(joint_states)
    }
    return value, policy


def _as_array(tensors) -> np.ndarray:
    if isinstance(tensors, np.ndarray):
        return tensors
    return np.stack(
        [t.probs if isinstance(t, TransitionTensor) else np.asarray(t) for t in tensors]
    )

"""Predictive models and training.

Maps beneficiary features to per-arm transition tensors and trains them
under four losses: MSE, NLL, the simulation-based decision loss
(Whittle planning + Monte Carlo rollouts), and the decomposed decision
loss (analytic dual layer). Everything is plain numpy with hand-derived
gradients; the models are small enough that this is both fast and exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dec_layer
from .dec_layer import RegularizerConfig, SolverConfig, forward_pass, build_returns_table
from .mdp import (
    DiscountedSetup,
    RewardSpec,
    TransitionTensor,
    WhittleTable,
    batched_policy_returns,
    engagement_rewards,
    whittle_index,
    _optimal_subsidized_values,
    _policy_chain,
)
from .mdp import ENGAGEMENT
from .planning import Cohort, WhittleTopB, simulate_joint, simulation_horizon
from .datasets import TrajectoryData


# ---------------------------------------------------------------------------
# Predictive models


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: linear, or an MLP with `layers` hidden layers of width `hidden_dim`."""

    kind: str = "linear"  # "linear" | "mlp"
    layers: int = 2
    hidden_dim: int = 64


MODEL_CAPACITIES = {
    "small": ModelSpec(kind="linear"),
    "medium": ModelSpec(kind="mlp", layers=2, hidden_dim=64),
    "large": ModelSpec(kind="mlp", layers=4, hidden_dim=500),
}


class PredictiveModel:
    """Feature -> transition-tensor predictor with manual backprop.

    Emits one logit per (s, a, s') triple and normalizes each (s, a) row
    with a softmax, so predictions are valid stochastic tensors by
    construction.
    """

    def __init__(self, spec: ModelSpec, feature_dim: int, num_states: int, seed: int = 0):
        self.spec = spec
        self.feature_dim = feature_dim
        self.num_states = num_states
        out_dim = num_states * 2 * num_states
        if spec.kind == "linear":
            dims = [feature_dim, out_dim]
        elif spec.kind == "mlp":
            dims = [feature_dim] + [spec.hidden_dim] * spec.layers + [out_dim]
        else:
            raise ValueError(f"unknown architecture {spec.kind!r}")
        rng = np.random.default_rng(seed)
        self.weights = [
            rng.standard_normal((fan_in, fan_out)) * 0.01 / np.sqrt(fan_in)
            for fan_in, fan_out in zip(dims[:-1], dims[1:])
        ]
        self.biases = [np.zeros(fan_out) for fan_out in dims[1:]]

    # -- forward / backward ------------------------------------------------

    def forward(self, features: np.ndarray):
        """Returns ((N, S, 2, S) tensors, cache for backward)."""
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(
                f"expected features of shape (N, {self.feature_dim}), got {x.shape}"
            )
        activations = [x]
        h = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            activations.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        s = self.num_states
        logits4 = logits.reshape(-1, s, 2, s)
        shifted = logits4 - logits4.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        tensors = exp / exp.sum(axis=-1, keepdims=True)
        return tensors, (activations, tensors)

    def backward(self, cache, grad_tensors: np.ndarray):
        """Parameter gradients given dL/dtensors."""
        activations, tensors = cache
        inner = np.sum(grad_tensors * tensors, axis=-1, keepdims=True)
        grad_logits = tensors * (grad_tensors - inner)
        g = grad_logits.reshape(activations[-1].shape[0], -1)
        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            grad_w[layer] = activations[layer].T @ g
            grad_b[layer] = g.sum(axis=0)
            if layer > 0:
                g = (g @ self.weights[layer].T) * (activations[layer] > 0)
        return grad_w, grad_b

    # -- parameter vector helpers -----------------------------------------

    def get_theta(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def set_theta(self, theta: np.ndarray) -> None:
        offset = 0
        for arrs in (self.weights, self.biases):
            for i, a in enumerate(arrs):
                arrs[i] = theta[offset : offset + a.size].reshape(a.shape).copy()
                offset += a.size
        if offset != theta.size:
            raise ValueError("theta size mismatch")


def predict(model: PredictiveModel, features: np.ndarray) -> list[TransitionTensor]:
    tensors, _ = model.forward(np.asarray(features, dtype=float))
    return [TransitionTensor(t) for t in tensors]


# ---------------------------------------------------------------------------
# Losses. Each returns (value, dL/dtensors) so training can chain
# model.backward; decision losses are returns (to maximize).


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    value = float(np.mean(diff * diff))
    return value, 2.0 * diff / diff.size


def nll_loss(pred: np.ndarray, trajectories: TrajectoryData) -> tuple[float, np.ndarray]:
    """Negative log likelihood of observed transitions under the predictions."""
    pred = np.asarray(pred, dtype=float)
    counts = trajectories.counts
    if pred.shape != counts.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {counts.shape}")
    clipped = np.clip(pred, 1e-12, None)
    value = float(-np.sum(counts * np.log(clipped)))
    grad = -counts / clipped
    return value, grad


def dec_dfl_cohort_loss(
    pred: np.ndarray,
    cohort: Cohort,
    reg: RegularizerConfig,
    cfg: SolverConfig | None = None,
) -> tuple[float, np.ndarray]:
    """Decomposed decision loss of one cohort (a return; maximize)."""
    if cfg is None:
        cfg = SolverConfig(budget=cohort.budget, gamma=cohort.setup.gamma)
    return dec_layer.dec_dfl_loss(pred, cohort.tensors, reg, cfg, cohort.setup)


# -- SIM-DFL ----------------------------------------------------------------


def whittle_index_gradient(
    T: np.ndarray, wi: np.ndarray, R: RewardSpec, setup: DiscountedSetup
) -> np.ndarray:
    """d WI[s] / d T(s~, a~, s~') by implicit differentiation of the
    indifference condition at each index point.

    Returns (S, S, 2, S): leading axis is the indexed state.
    """
    T = np.asarray(T, dtype=float)
    num_states = T.shape[0]
    gamma = setup.gamma
    rewards = R.per_step(num_states, np.zeros(num_states, dtype=int))
    eye = np.eye(num_states)
    grad = np.zeros((num_states,) + T.shape)
    tensor = TransitionTensor(T)
    for s in range(num_states):
        m = wi[s]
        Q = _optimal_subsidized_values(tensor, rewards, m, gamma)
        actions = np.where(Q[:, 1] > Q[:, 0] + 1e-14, 1, 0)
        T_pi = _policy_chain(tensor, actions)
        M = eye - gamma * T_pi
        r_pi = rewards + m * (1 - actions)
        V = np.linalg.solve(M, r_pi)
        dV_dm = np.linalg.solve(M, (1 - actions).astype(float))
        delta = T[s, 1, :] - T[s, 0, :]
        dF_dm = -1.0 + gamma * delta @ dV_dm
        if abs(dF_dm) < 1e-12:
            continue  # degenerate indifference; leave gradient at zero
        # direct dependence of Q(s,1) - Q(s,0) on the rows of state s
        dF_dT = np.zeros_like(T)
        dF_dT[s, 1, :] += gamma * V
        dF_dT[s, 0, :] -= gamma * V
        # dependence through the value function: only rows the policy uses
        h = np.linalg.solve(M.T, gamma * delta)
        dF_dT[np.arange(num_states), actions, :] += gamma * np.outer(h, V)
        grad[s] = -dF_dT / dF_dm
    return grad


def _soft_top_b_probs(scores: np.ndarray, budget: float, temperature: float):
    """Soft top-B marginals p_i = sigmoid((w_i - theta) / tau) with theta
    chosen per row so that sum_i p_i = B. Returns (p, dtheta/dw weights).
    """
    traj, n = scores.shape
    if budget >= n:
        return np.ones_like(scores), None
    lo = scores.min(axis=1) - 40.0 * temperature
    hi = scores.max(axis=1) + 40.0 * temperature
    for _ in range(60):
        theta = 0.5 * (lo + hi)
        p = _sigmoid((scores - theta[:, None]) / temperature)
        total = p.sum(axis=1)
        too_big = total > budget
        lo = np.where(too_big, theta, lo)
        hi = np.where(too_big, hi, theta)
    theta = 0.5 * (lo + hi)
    p = _sigmoid((scores - theta[:, None]) / temperature)
    return p, theta


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sim_dfl_loss(
    pred: np.ndarray,
    cohort: Cohort,
    trajectories: int,
    seed: int,
    temperature: float = 0.1,
) -> tuple[float, np.ndarray]:
    """Simulated decision loss of the Whittle top-B policy (a return).

    The policy's Whittle indices come from the predictions; rollouts use
    the true dynamics. The gradient estimator samples actions from a
    temperature-smoothed top-B selection and combines a score-function
    term over the selection with implicit differentiation of the Whittle
    indices. Sampling is common-random-number coupled through the seed.
    """
    pred = np.asarray(pred, dtype=float)
    n, num_states = pred.shape[0], pred.shape[1]
    setup = cohort.setup
    reward_spec = RewardSpec(ENGAGEMENT)
    wi = np.empty((n, num_states))
    wi_grads = np.empty((n, num_states) + pred.shape[1:])
    for i in range(n):
        table = whittle_index(TransitionTensor(pred[i]), reward_spec, setup)
        wi[i] = table.wi
        wi_grads[i] = whittle_index_gradient(pred[i], table.wi, reward_spec, setup)

    rng = np.random.default_rng(seed)
    horizon = simulation_horizon(setup, n)
    rewards = engagement_rewards(num_states)
    cum_trans = np.cumsum(cohort.tensors, axis=-1)
    budget = cohort.budget
    states = rng.choice(num_states, size=(trajectories, n), p=setup.initial_dist)
    arm_idx = np.arange(n)[None, :]

    returns = np.zeros(trajectories)
    score_wi = np.zeros((trajectories, n, num_states))  # d log P / d WI[i, s]
    discount = 1.0
    for _ in range(horizon):
        scores = wi[arm_idx, states]
        p, theta = _soft_top_b_probs(scores, budget, temperature)
        if theta is None:
            actions = np.ones_like(states)
        else:
            actions = (rng.random(size=p.shape) < p).astype(int)
            # d log P / d w, accounting for the normalizing threshold
            sig_prime = p * (1.0 - p)
            denom = np.clip(sig_prime.sum(axis=1, keepdims=True), 1e-12, None)
            dtheta_dw = sig_prime / denom
            dlogp_dp = (actions - p) / np.clip(p * (1.0 - p), 1e-12, None)
            common = (dlogp_dp * sig_prime).sum(axis=1, keepdims=True)
            dlogp_dw = (dlogp_dp * sig_prime - common * dtheta_dw) / temperature
            np.add.at(
                score_wi,
                (np.arange(trajectories)[:, None], arm_idx, states),
                dlogp_dw,
            )
        returns += discount * rewards[states].sum(axis=1)
        u = rng.random(size=states.shape)
        cdf = cum_trans[arm_idx, states, actions, :]
        states = np.minimum((u[..., None] > cdf).sum(axis=-1), num_states - 1)
        discount *= setup.gamma

    value = float(returns.mean())
    centered = returns - returns.mean()  # baseline reduces estimator variance
    grad_wi = np.einsum("t,tis->is", centered, score_wi) / trajectories
    grad_pred = np.einsum("is,isjak->ijak", grad_wi, wi_grads)
    return value, grad_pred


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class LossSpec:
    name: str  # mse | nll | sim-dfl | dec-dfl | fast-dec-dfl
    trajectories: int = 100
    regularizer: str = "entropy"
    alpha: float = 1.0
    temperature: float = 0.1
    epsilon: float = 1e-6  # dual-bisection tolerance of the decomposed layer

    def __post_init__(self):
        if self.name not in ("mse", "nll", "sim-dfl", "dec-dfl", "fast-dec-dfl"):
            raise ValueError(f"unknown loss {self.name!r}")

    @property
    def maximize(self) -> bool:
        return self.name in ("sim-dfl", "dec-dfl", "fast-dec-dfl")


@dataclass(frozen=True)
class TrainingConfig:
    loss: LossSpec
    learning_rate: float = 1e-2
    epochs: int = 50
    seed: int = 0
    patience: int = 10
    model: ModelSpec = field(default_factory=ModelSpec)


@dataclass
class DatasetSplits:
    train: list[Cohort]
    val: list[Cohort]
    test: list[Cohort]
    train_trajectories: list[TrajectoryData] | None = None
    val_trajectories: list[TrajectoryData] | None = None


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Adaptive per-parameter step sizes; the standard first/second moment scheme."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _cohort_loss(
    model: PredictiveModel,
    cohort: Cohort,
    trajs: TrajectoryData | None,
    spec: LossSpec,
    seed: int,
) -> tuple[float, np.ndarray, tuple]:
    tensors, cache = model.forward(cohort.features)
    name = spec.name
    if name == "mse":
        value, grad = mse_loss(tensors, cohort.tensors)
    elif name == "nll":
        if trajs is None:
            raise ValueError("nll loss needs trajectory data")
        value, grad = nll_loss(tensors, trajs)
    elif name in ("dec-dfl", "fast-dec-dfl"):
        reg = RegularizerConfig(kind=spec.regularizer, alpha=spec.alpha)
        cfg = SolverConfig(
            budget=cohort.budget, gamma=cohort.setup.gamma, epsilon=spec.epsilon
        )
        value, grad = dec_dfl_cohort_loss(tensors, cohort, reg, cfg)
    elif name == "sim-dfl":
        value, grad = sim_dfl_loss(
            tensors, cohort, spec.trajectories, seed, spec.temperature
        )
    else:  # pragma: no cover
        raise ValueError(name)
    return value, grad, cache


def run_epoch(
    model: PredictiveModel,
    optimizer: Adam | None,
    cohorts: list[Cohort],
    trajectories: list[TrajectoryData] | None,
    spec: LossSpec,
    seed: int,
) -> float:
    """One pass over the cohorts; updates parameters if an optimizer is given.

    Returns the mean loss value across cohorts.
    """
    total = 0.0
    sign = -1.0 if spec.maximize else 1.0
    for k, cohort in enumerate(cohorts):
        trajs = trajectories[k] if trajectories is not None else None
        value, grad_tensors, cache = _cohort_loss(model, cohort, trajs, spec, seed + 7919 * k)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} on cohort {k}")
        total += value
        if optimizer is not None:
            grad_w, grad_b = model.backward(cache, sign * grad_tensors)
            flat = np.concatenate(
                [g.ravel() for g in grad_w] + [g.ravel() for g in grad_b]
            )
            model.set_theta(optimizer.step(model.get_theta(), flat))
    return total / max(len(cohorts), 1)


def train(
    config: TrainingConfig, data: DatasetSplits
) -> tuple[PredictiveModel, list[dict]]:
    """Gradient training with validation-based early stopping.

    Decision losses are ascended, MSE/NLL descended. The returned model
    carries the parameters of the best validation epoch; the log has one
    record per (epoch, split).
    """
    if not data.train:
        raise ValueError("empty training split")
    feature_dim = data.train[0].features.shape[1]
    num_states = data.train[0].num_states
    model = PredictiveModel(config.model, feature_dim, num_states, seed=config.seed)
    optimizer = Adam(config.learning_rate)
    spec = config.loss
    log: list[dict] = []
    best_val = np.inf
    best_theta = model.get_theta()
    stale = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        train_value = run_epoch(
            model, optimizer, data.train, data.train_trajectories, spec, config.seed + epoch
        )
        elapsed = time.perf_counter() - start
        val_value = run_epoch(
            model, None, data.val, data.val_trajectories, spec, config.seed
        )
        log.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss": spec.name,
                "value": train_value,
                "seconds": elapsed,
            }
        )
        log.append(
            {"epoch": epoch, "split": "val", "loss": spec.name, "value": val_value, "seconds": 0.0}
        )
        score = -val_value if spec.maximize else val_value
        if score < best_val - 1e-12:
            best_val = score
            best_theta = model.get_theta()
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    model.set_theta(best_theta)
    return model, log


def grid_search(
    base: TrainingConfig,
    learning_rates: list[float],
    data: DatasetSplits,
    seeds: list[int] | None = None,
) -> tuple[PredictiveModel, TrainingConfig, list[dict]]:
    """Train over the hyperparameter grid and keep the best validation run."""
    seeds = seeds if seeds is not None else [base.seed]
    best = None
    all_logs: list[dict] = []
    for lr in learning_rates:
        for seed in seeds:
            config = replace(base, learning_rate=lr, seed=seed)
            model, log = train(config, data)
            val_value = run_epoch(
                model, None, data.val, data.val_trajectories, config.loss, seed
            )
            score = -val_value if config.loss.maximize else val_value
            for rec in log:
                rec.update({"lr": lr, "seed": seed})
            all_logs.extend(log)
            if best is None or score < best[0]:
                best = (score, model, config)
    _, model, config = best
    return model, config, all_logs


# ---------------------------------------------------------------------------
# Decision-quality evaluation


@dataclass(frozen=True)
class DQReport:
    joint_dq: float
    decomposed_dq: float
    never_act_dq: float
    perfect_joint_dq: float
    perfect_decomposed_dq: float
    normalized_joint_dq: float | None
    normalized_decomposed_dq: float | None


def _decomposed_dq(pred: np.ndarray, cohort: Cohort, alpha: float = 1e-3) -> float:
    cfg = SolverConfig(budget=cohort.budget, gamma=cohort.setup.gamma)
    reg = RegularizerConfig(kind="entropy", alpha=alpha)
    tables = build_returns_table(pred, cohort.tensors, cohort.setup)
    sol = forward_pass(tables, reg, cfg)
    return float(np.sum(sol.z_star * tables.j_true))


def _joint_dq(pred: np.ndarray, cohort: Cohort, trajectories: int, seed: int) -> float:
    reward_spec = RewardSpec(ENGAGEMENT)
    tables = [
        whittle_index(TransitionTensor(p), reward_spec, cohort.setup) for p in pred
    ]
    policy = WhittleTopB(tables=tables, budget=int(round(cohort.budget)))
    result = simulate_joint(cohort, policy, trajectories, seed)
    return result.mean_return


def evaluate_dq(
    model: PredictiveModel | None,
    cohorts: list[Cohort],
    trajectories: int = 1000,
    seed: int = 0,
    alpha: float = 1e-3,
    predictions: list[np.ndarray] | None = None,
) -> DQReport:
    """Joint and decomposed decision quality with never-act / perfect anchors.

    Either a model or explicit per-cohort prediction arrays must be given.
    Normalized values rescale so never-act maps to 0 and planning with the
    true tensors maps to 1; a degenerate rescale is reported as None.
    trajectories=0 skips the (slow) simulated joint evaluation and reports
    NaN for the joint columns.
    """
    if predictions is None:
        if model is None:
            raise ValueError("need a model or explicit predictions")
        predictions = [model.forward(c.features)[0] for c in cohorts]
    joint = decomposed = never = perfect_joint = perfect_dec = 0.0
    reward_spec = RewardSpec(ENGAGEMENT)
    for k, cohort in enumerate(cohorts):
        pred = predictions[k]
        if trajectories > 0:
            joint += _joint_dq(pred, cohort, trajectories, seed + k)
        decomposed += _decomposed_dq(pred, cohort, alpha)
        j_true_passive = batched_policy_returns(
            cohort.tensors, reward_spec, cohort.setup
        )[:, 0]
        never += float(j_true_passive.sum())
        if trajectories > 0:
            perfect_joint += _joint_dq(cohort.tensors, cohort, trajectories, seed + k)
        perfect_dec += _decomposed_dq(cohort.tensors, cohort, alpha)
    n = max(len(cohorts), 1)
    joint, decomposed, never = joint / n, decomposed / n, never / n
    perfect_joint, perfect_dec = perfect_joint / n, perfect_dec / n
    if trajectories <= 0:
        joint = perfect_joint = float("nan")

    def _norm(value, perfect):
        span = perfect - never
        if abs(span) < 1e-9:
            return None
        return (value - never) / span

    return DQReport(
        joint_dq=joint,
        decomposed_dq=decomposed,
        never_act_dq=never,
        perfect_joint_dq=perfect_joint,
        perfect_decomposed_dq=perfect_dec,
        normalized_joint_dq=_norm(joint, perfect_joint),
        normalized_decomposed_dq=_norm(decomposed, perfect_dec),
    )

"""Environment models that predict the one-step observation change from a history window.

Both models work in standardized units: inputs are HistoryVectors built from
standardized observations, targets are differences of standardized observations.
The rollout engine converts back to raw units, clamps SOFA to [0, 24] and lactate
to >= 0 after every step, and scores transitions with the reward module.
"""
from __future__ import annotations
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg
import torch
from torch import nn
from torch.nn import functional as F
from tqdm.auto import tqdm

from utils.errors import BatchSizeError, ConfigError, InsufficientDataError, ShapeError
from .schemas import DynamicsConfig, FeatureSchema, RewardParams, N_LAGS, SOFA_MAX
from .data_core import (
    NO_ACTION, Standardizer, Trajectory, histories_from_lags, trajectory_lags,
)
from .policies import StochasticPolicy, sample_actions, log_proba_of
from .reward import observation_rewards

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BN_EPS = 1e-5


class DeltaPredictor(Protocol):
    standardizer: Standardizer

    def predict(self, histories: np.ndarray) -> np.ndarray:
        ...


def predict_delta(model: DeltaPredictor, histories: np.ndarray) -> np.ndarray:
    """Standardized one-step change for a batch of HistoryVectors, either model kind."""
    return model.predict(np.asarray(histories, dtype=float))


def transition_dataset(cohort: Sequence[Trajectory], standardizer: Standardizer) -> Tuple[np.ndarray, np.ndarray]:
    """(histories, deltas) for every step that has a successor observation."""
    histories, deltas = [], []
    for traj in cohort:
        if traj.length < 2:
            continue
        obs_lags, act_lags = trajectory_lags(traj)
        std_obs = standardizer.apply(traj.observations)
        histories.append(histories_from_lags(standardizer.apply(obs_lags[:-1]), act_lags[:-1]))
        deltas.append(std_obs[1:] - std_obs[:-1])
    if not histories:
        raise InsufficientDataError("cohort has no transitions")
    return np.concatenate(histories), np.concatenate(deltas)


# ---------------- Linear model ---------------- #

@dataclass
class LinearDynamics:
    weights: np.ndarray  # (d_raw, history_dim)
    bias: np.ndarray  # (d_raw,)
    ridge_lambda: float
    standardizer: Standardizer

    def predict(self, histories: np.ndarray) -> np.ndarray:
        histories = np.asarray(histories, dtype=float)
        if histories.ndim != 2 or histories.shape[1] != self.weights.shape[1]:
            raise ShapeError(f"expected histories of width {self.weights.shape[1]}, got {histories.shape}")
        return histories @ self.weights.T + self.bias


def fit_linear(
    histories: np.ndarray, deltas: np.ndarray, ridge_lambda: float, standardizer: Optional[Standardizer] = None
) -> LinearDynamics:
    """Least squares with an L2 penalty on the weights (not the bias), via the normal equations."""
    X = np.asarray(histories, dtype=float)
    Y = np.asarray(deltas, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"histories {X.shape} and deltas {Y.shape} do not line up")
    n = X.shape[0]
    if n < 1:
        raise InsufficientDataError("fit_linear needs at least one sample")
    if ridge_lambda < 0:
        raise ConfigError("ridge_lambda must be nonnegative")
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    if ridge_lambda > 0:
        gram = Xc.T @ Xc / n + ridge_lambda * np.eye(X.shape[1])
        W = scipy.linalg.solve(gram, Xc.T @ Yc / n, assume_a="pos")
    else:
        W = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    standardizer = standardizer or Standardizer.identity(Y.shape[1])
    return LinearDynamics(weights=W.T, bias=y_mean - x_mean @ W, ridge_lambda=ridge_lambda, standardizer=standardizer)


# ---------------- Network model ---------------- #

class MlpDynamics(nn.Module):
    """Affine -> batch norm -> ReLU, twice, then an affine output layer."""

    def __init__(self, history_dim: int, d_raw: int, hidden: Tuple[int, int] = (128, 128),
                 standardizer: Optional[Standardizer] = None):
        super().__init__()
        h1, h2 = hidden
        self.history_dim = history_dim
        self.d_raw = d_raw
        self.hidden = (h1, h2)
        self.fc1 = nn.Linear(history_dim, h1, dtype=DTYPE)
        self.bn1 = nn.BatchNorm1d(h1, eps=BN_EPS, dtype=DTYPE)
        self.fc2 = nn.Linear(h1, h2, dtype=DTYPE)
        self.bn2 = nn.BatchNorm1d(h2, eps=BN_EPS, dtype=DTYPE)
        self.out = nn.Linear(h2, d_raw, dtype=DTYPE)
        self.standardizer = standardizer or Standardizer.identity(d_raw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.bn1(self.fc1(x)))
        x = F.relu(self.bn2(self.fc2(x)))
        return self.out(x)

    def predict(self, histories: np.ndarray) -> np.ndarray:
        return mlp_forward(self, histories, training_mode=False).numpy()


def _as_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=float), dtype=DTYPE)


def mlp_forward(model: MlpDynamics, batch, training_mode: bool) -> torch.Tensor:
    """Training mode normalizes with batch statistics and updates running statistics."""
    x = _as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.history_dim:
        raise ShapeError(f"expected a (n, {model.history_dim}) batch, got {tuple(x.shape)}")
    if len(x) == 0:
        raise InsufficientDataError("empty batch")
    if training_mode and len(x) < 2:
        raise BatchSizeError("batch normalization in training mode needs at least 2 samples")
    model.train(training_mode)
    if training_mode:
        return model(x)
    with torch.no_grad():
        return model(x)


@dataclass
class BackwardResult:
    loss: float
    grads: Dict[str, torch.Tensor]


def mlp_backward(model: MlpDynamics, batch, targets) -> BackwardResult:
    """Gradients of the mean squared error with respect to every parameter."""
    y = _as_tensor(targets)
    pred = mlp_forward(model, batch, training_mode=True)
    if y.shape != pred.shape:
        raise ShapeError(f"targets {tuple(y.shape)} do not match predictions {tuple(pred.shape)}")
    loss = F.mse_loss(pred, y)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params)
    return BackwardResult(loss=float(loss.detach()), grads=dict(zip(names, grads)))


# ---------------- Adam ---------------- #

@dataclass
class AdamState:
    optimizer: torch.optim.Adam
    names: List[str]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0


def make_adam_state(params: Dict[str, torch.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                    beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    names = list(params)
    optimizer = torch.optim.Adam([params[n] for n in names], lr=lr, betas=(beta1, beta2), eps=epsilon)
    return AdamState(optimizer=optimizer, names=names, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
              state: AdamState) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """Bias-corrected Adam update of `params` in place."""
    if set(grads) != set(state.names) or set(params) != set(state.names):
        raise ShapeError("parameter and gradient names do not match the optimizer state")
    for name in state.names:
        if params[name].shape != grads[name].shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(grads[name].shape)}, "
                             f"parameter has {tuple(params[name].shape)}")
        params[name].grad = grads[name].detach().clone()
    state.optimizer.step()
    state.step += 1
    return params, state


# ---------------- Training ---------------- #

def eval_mse(model: DeltaPredictor, histories: np.ndarray, deltas: np.ndarray) -> float:
    """Mean over samples and output dimensions of the squared error."""
    if len(histories) == 0:
        raise InsufficientDataError("cannot evaluate on an empty dataset")
    pred = model.predict(np.asarray(histories, dtype=float))
    return float(np.mean((pred - np.asarray(deltas, dtype=float)) ** 2))


def _batches(perm: torch.Tensor, batch_size: int) -> List[torch.Tensor]:
    chunks = list(torch.split(perm, batch_size))
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = torch.cat([chunks[-2], chunks.pop()])
    return chunks


def train_dynamics(
    train: Tuple[np.ndarray, np.ndarray],
    val: Tuple[np.ndarray, np.ndarray],
    config: DynamicsConfig,
    standardizer: Optional[Standardizer] = None,
) -> Tuple[MlpDynamics, List[Dict[str, float]]]:
    """Mini-batch Adam; returns the best-validation snapshot and the per-epoch MSE curve."""
    X, Y = (np.asarray(a, dtype=float) for a in train)
    Xv, Yv = (np.asarray(a, dtype=float) for a in val)
    if len(X) < 2 or len(Xv) == 0:
        raise InsufficientDataError("train_dynamics needs at least 2 training and 1 validation samples")
    torch.manual_seed(config.seed)
    model = MlpDynamics(X.shape[1], Y.shape[1], config.hidden, standardizer)
    params = dict(model.named_parameters())
    state = make_adam_state(params, lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    X_t, Y_t = _as_tensor(X), _as_tensor(Y)

    curve: List[Dict[str, float]] = []
    best_val, best_state = float("inf"), None
    for epoch in tqdm(range(config.epochs), desc="dynamics", leave=False):
        total = 0.0
        for idx in _batches(torch.randperm(len(X), generator=generator), config.batch_size):
            result = mlp_backward(model, X_t[idx], Y_t[idx])
            adam_step(params, result.grads, state)
            total += result.loss * len(idx)
        val_mse = eval_mse(model, Xv, Yv)
        curve.append({"epoch": epoch + 1, "train_mse": total / len(X), "val_mse": val_mse})
        if val_mse < best_val:
            best_val, best_state = val_mse, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"Dynamics network trained: best validation MSE {best_val:.5f} over {config.epochs} epochs")
    return model, curve


def fit_dynamics(
    train_cohort: Sequence[Trajectory], val_cohort: Sequence[Trajectory],
    config: DynamicsConfig, standardizer: Standardizer,
) -> Tuple[DeltaPredictor, List[Dict[str, float]]]:
    """Fit the configured model kind on cohort transitions."""
    train = transition_dataset(train_cohort, standardizer)
    val = transition_dataset(val_cohort, standardizer)
    if config.model == "linear":
        model = fit_linear(*train, config.ridge_lambda, standardizer)
        curve = [{"epoch": 1, "train_mse": eval_mse(model, *train), "val_mse": eval_mse(model, *val)}]
        return model, curve
    return train_dynamics(train, val, config, standardizer)


# ---------------- Rollouts ---------------- #

@dataclass
class RolloutResult:
    observations: np.ndarray  # (horizon + 1, d_raw), row 0 is the start observation
    rewards: np.ndarray  # (horizon,)
    actions: np.ndarray  # (horizon,)
    log_probs: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass
class RolloutBatch:
    """Simulated trajectories with the policy inputs seen at each step."""

    observations: np.ndarray  # (n, horizon + 1, d_raw)
    actions: np.ndarray  # (n, horizon)
    rewards: np.ndarray  # (n, horizon)
    obs_lags: np.ndarray  # (n, horizon, 4, d_raw)
    act_lags: np.ndarray  # (n, horizon, 4), lag 0 = -1
    log_probs: Optional[np.ndarray] = None  # (n, horizon)
    start_index: Optional[np.ndarray] = field(default=None)

    @property
    def n(self) -> int:
        return len(self.actions)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def returns(self, gamma: float) -> np.ndarray:
        return self.rewards @ (gamma ** np.arange(self.horizon))

    def returns_to_go(self, gamma: float) -> np.ndarray:
        discounts = gamma ** np.arange(self.horizon)
        tail = np.cumsum((self.rewards * discounts)[:, ::-1], axis=1)[:, ::-1]
        return tail / discounts


def clamp_observations(obs: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    obs[..., schema.sofa_index] = np.clip(obs[..., schema.sofa_index], 0.0, SOFA_MAX)
    obs[..., schema.lactate_index] = np.maximum(obs[..., schema.lactate_index], 0.0)
    return obs


def simulate_model(
    model: DeltaPredictor,
    obs_lags: np.ndarray,
    act_lags: np.ndarray,
    horizon: int,
    schema: FeatureSchema,
    reward: RewardParams,
    policy: Optional[StochasticPolicy] = None,
    logged_actions: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    stochastic: bool = False,
) -> RolloutBatch:
    """Batched rollout from start windows (n, 4, d_raw) / (n, 4)."""
    if horizon < 1:
        raise ConfigError(f"rollout horizon must be at least 1, got {horizon}")
    if policy is None and logged_actions is None:
        raise ConfigError("rollout needs either a policy or logged actions")
    rng = rng or np.random.default_rng(0)
    n, _, d = obs_lags.shape
    obs_lags = np.array(obs_lags, dtype=float)
    act_lags = np.array(act_lags, dtype=int)
    act_lags[:, 0] = NO_ACTION

    observations = np.empty((n, horizon + 1, d))
    observations[:, 0] = obs_lags[:, 0]
    actions = np.empty((n, horizon), dtype=int)
    rewards = np.empty((n, horizon))
    step_obs_lags = np.empty((n, horizon, N_LAGS, d))
    step_act_lags = np.empty((n, horizon, N_LAGS), dtype=int)
    log_probs = np.empty((n, horizon)) if policy is not None else None

    for t in range(horizon):
        step_obs_lags[:, t] = obs_lags
        step_act_lags[:, t] = act_lags
        if policy is not None:
            proba = policy.action_proba(obs_lags, act_lags)
            a_t = sample_actions(proba, rng.random(n))
            log_probs[:, t] = log_proba_of(proba, a_t)
        else:
            a_t = np.asarray(logged_actions)[:, t]
        actions[:, t] = a_t
        full_lags = act_lags.copy()
        full_lags[:, 0] = a_t
        std_current = model.standardizer.apply(obs_lags)
        delta = predict_delta(model, histories_from_lags(std_current, full_lags))
        if stochastic:
            delta = delta + rng.standard_normal(delta.shape)
        nxt = clamp_observations(model.standardizer.invert(std_current[:, 0] + delta), schema)
        rewards[:, t] = observation_rewards(obs_lags[:, 0], nxt, schema, reward)
        observations[:, t + 1] = nxt
        obs_lags = np.concatenate([nxt[:, None, :], obs_lags[:, :-1]], axis=1)
        act_lags = np.concatenate([np.full((n, 1), NO_ACTION), full_lags[:, :-1]], axis=1)

    return RolloutBatch(observations, actions, rewards, step_obs_lags, step_act_lags, log_probs)


def rollout(
    model: DeltaPredictor,
    prefix: Trajectory,
    schema: FeatureSchema,
    policy: Optional[StochasticPolicy] = None,
    logged_actions: Optional[np.ndarray] = None,
    horizon: int = 10,
    seed: int = 0,
    stochastic: bool = False,
    reward: Optional[RewardParams] = None,
) -> RolloutResult:
    """Roll the model forward from the last step of `prefix`.

    With no policy the logged actions are replayed and the horizon is cut to their count.
    """
    if horizon < 1:
        raise ConfigError(f"rollout horizon must be at least 1, got {horizon}")
    if policy is None:
        if logged_actions is None or len(logged_actions) == 0:
            raise ConfigError("replaying needs at least one logged action")
        horizon = min(horizon, len(logged_actions))
        logged_actions = np.asarray(logged_actions, dtype=int)[None, :horizon]
    obs_lags, act_lags = trajectory_lags(prefix, include_current_action=False)
    batch = simulate_model(
        model, obs_lags[-1:], act_lags[-1:], horizon, schema, reward or RewardParams(),
        policy=policy, logged_actions=logged_actions, rng=np.random.default_rng(seed), stochastic=stochastic,
    )
    return RolloutResult(
        observations=batch.observations[0],
        rewards=batch.rewards[0],
        actions=batch.actions[0],
        log_probs=None if batch.log_probs is None else batch.log_probs[0],
    )


def replay_logged(model: DeltaPredictor, trajectory: Trajectory, schema: FeatureSchema,
                  horizon: int = 10, reward: Optional[RewardParams] = None) -> Optional[RolloutResult]:
    """Replay a trajectory's clinician actions from its first state; None when it has a single step."""
    steps = min(horizon, trajectory.length - 1)
    if steps < 1:
        return None
    prefix = Trajectory(
        patient_id=trajectory.patient_id,
        observations=trajectory.observations[:1],
        actions=trajectory.actions[:1],
        rewards=trajectory.rewards[:1],
        schema=schema,
    )
    return rollout(model, prefix, schema, logged_actions=trajectory.actions[:steps], horizon=steps, reward=reward)


def rollout_frame(result: RolloutResult, schema: FeatureSchema, actual: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Long format `t,feature,predicted,actual` for plotting traces."""
    rows = []
    for t in range(result.horizon + 1):
        for j, name in enumerate(schema.names):
            rows.append({
                "t": t,
                "feature": name,
                "predicted": result.observations[t, j],
                "actual": actual[t, j] if actual is not None and t < len(actual) else np.nan,
            })
    return pd.DataFrame(rows, columns=["t", "feature", "predicted", "actual"])


def write_rollout_csv(result: RolloutResult, schema: FeatureSchema, path: str | Path,
                      actual: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    rollout_frame(result, schema, actual).to_csv(path, index=False)
    return path

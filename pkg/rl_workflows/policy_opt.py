"""Policy search inside a learned environment model, starting from the cloned clinician.

REINFORCE and PPO both use a mean-return baseline and no critic. Learned policies
can be blended with the clinician per SOFA regime.
"""
from __future__ import annotations
import copy
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm.auto import tqdm

from utils.errors import DomainError, InsufficientDataError
from .schemas import BlendSpec, FeatureSchema, PpoConfig, RewardParams, N_ACTIONS, N_LAGS, SOFA_MAX
from .data_core import Trajectory, cohort_lags, initial_lags
from .behavior_clone import PolicyNet, PROBA_FLOOR
from .dynamics import DTYPE, DeltaPredictor, RolloutBatch, make_adam_state, adam_step, simulate_model
from .policies import StochasticPolicy

logger = logging.getLogger(__name__)


def init_from_bc(bc_model: PolicyNet) -> PolicyNet:
    return copy.deepcopy(bc_model)


def collect_model_rollouts(
    policy: StochasticPolicy,
    model: DeltaPredictor,
    cohort: Sequence[Trajectory],
    n: int,
    horizon: int,
    seed: int,
    schema: FeatureSchema,
    reward: Optional[RewardParams] = None,
    stochastic: bool = False,
) -> RolloutBatch:
    """`n` model rollouts, each from the initial state of a uniformly drawn logged trajectory."""
    if not cohort:
        raise InsufficientDataError("cannot start rollouts from an empty cohort")
    rng = np.random.default_rng(seed)
    start = rng.integers(0, len(cohort), size=n)
    obs_lags, act_lags = initial_lags(cohort)
    batch = simulate_model(
        model, obs_lags[start], act_lags[start], horizon, schema, reward or RewardParams(),
        policy=policy, rng=rng, stochastic=stochastic,
    )
    batch.start_index = start
    return batch


def batch_log_proba(policy: PolicyNet, batch: RolloutBatch) -> torch.Tensor:
    """Differentiable log pi(a_t | h_t) for every step, shape (n, horizon)."""
    n, horizon = batch.actions.shape
    obs = batch.obs_lags.reshape(n * horizon, N_LAGS, -1)
    acts = batch.act_lags.reshape(n * horizon, N_LAGS)
    x = torch.as_tensor(policy.histories(obs, acts), dtype=DTYPE)
    logp = torch.log_softmax(policy(x), dim=1)
    taken = torch.as_tensor(batch.actions.reshape(-1), dtype=torch.long)
    return logp.gather(1, taken[:, None]).reshape(n, horizon)


def reinforce_objective(policy: PolicyNet, batch: RolloutBatch, gamma: float = 1.0) -> torch.Tensor:
    """Mean over rollouts of sum_t log pi(a_t|h_t) * (R - mean R)."""
    returns = batch.returns(gamma)
    advantage = torch.as_tensor(returns - returns.mean(), dtype=DTYPE)
    return (batch_log_proba(policy, batch).sum(dim=1) * advantage).mean()


def reinforce_update(policy: PolicyNet, batch: RolloutBatch, lr: float, gamma: float = 1.0) -> Tuple[PolicyNet, float]:
    """One plain gradient-ascent step; returns the policy and the loss before the step."""
    if batch.n == 0:
        raise InsufficientDataError("empty rollout batch")
    policy.train()
    optimizer = torch.optim.SGD(policy.parameters(), lr=lr)
    optimizer.zero_grad()
    loss = -reinforce_objective(policy, batch, gamma)
    loss.backward()
    optimizer.step()
    return policy, float(loss.detach())


def ppo_surrogate(new_logp: torch.Tensor, old_logp: torch.Tensor, advantage: torch.Tensor,
                  epsilon: float) -> torch.Tensor:
    """Per-step clipped objective min(rho*A, clip(rho, 1-eps, 1+eps)*A)."""
    ratio = torch.exp(new_logp - old_logp)
    clipped = torch.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)
    return torch.minimum(ratio * advantage, clipped * advantage)


def ppo_advantages(batch: RolloutBatch, gamma: float) -> np.ndarray:
    to_go = batch.returns_to_go(gamma)
    return to_go - to_go.mean()


def ppo_update(
    policy: PolicyNet, old_policy: PolicyNet, batch: RolloutBatch, config: PpoConfig, state=None,
) -> Tuple[PolicyNet, float, object]:
    """Several Adam epochs on the clipped surrogate; returns (policy, last loss, optimizer state)."""
    if batch.n == 0:
        raise InsufficientDataError("empty rollout batch")
    params = dict(policy.named_parameters())
    state = state or make_adam_state(params, lr=config.lr)
    with torch.no_grad():
        old_logp = batch_log_proba(old_policy, batch)
    advantage = torch.as_tensor(ppo_advantages(batch, config.gamma), dtype=DTYPE)
    loss_value = 0.0
    policy.train()
    for _ in range(config.epochs):
        loss = -ppo_surrogate(batch_log_proba(policy, batch), old_logp, advantage, config.clip_epsilon).mean()
        grads = torch.autograd.grad(loss, list(params.values()))
        adam_step(params, dict(zip(params, grads)), state)
        loss_value = float(loss.detach())
    policy.eval()
    return policy, loss_value, state


# ---------------- Blending ---------------- #

REGIMES = ("low", "medium", "high")


def sofa_regime(sofa: np.ndarray, spec: BlendSpec) -> np.ndarray:
    """0/1/2 for low/medium/high; both thresholds are inclusive."""
    sofa = np.asarray(sofa, dtype=float)
    if np.any(~np.isfinite(sofa)) or np.any(sofa < 0) or np.any(sofa > SOFA_MAX):
        raise DomainError("SOFA must lie in [0, 24] to pick a treatment regime")
    return np.where(sofa <= spec.sofa_low_max, 0, np.where(sofa >= spec.sofa_high_min, 2, 1))


class BlendedPolicy:
    """Clinician or learned distribution depending on the current SOFA regime."""

    def __init__(self, clinician: StochasticPolicy, learned: StochasticPolicy, spec: BlendSpec, sofa_index: int = 0):
        self.clinician = clinician
        self.learned = learned
        self.spec = spec
        self.sofa_index = sofa_index

    def action_proba(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        regime = sofa_regime(np.asarray(obs_lags)[:, 0, self.sofa_index], self.spec)
        use_learned = np.array([getattr(self.spec, r) == "learned" for r in REGIMES])[regime]
        proba = np.empty((len(obs_lags), N_ACTIONS))
        if np.any(~use_learned):
            proba[~use_learned] = self.clinician.action_proba(obs_lags[~use_learned], act_lags[~use_learned])
        if np.any(use_learned):
            proba[use_learned] = self.learned.action_proba(obs_lags[use_learned], act_lags[use_learned])
        return proba


def blend(clinician: StochasticPolicy, learned: StochasticPolicy, spec: BlendSpec,
          schema: Optional[FeatureSchema] = None) -> BlendedPolicy:
    return BlendedPolicy(clinician, learned, spec, schema.sofa_index if schema else 0)


def kl_divergence(mu: StochasticPolicy, pi: StochasticPolicy, obs_lags: np.ndarray, act_lags: np.ndarray) -> float:
    """Mean KL(mu || pi) over the given policy contexts."""
    p = np.maximum(mu.action_proba(obs_lags, act_lags), PROBA_FLOOR)
    q = np.maximum(pi.action_proba(obs_lags, act_lags), PROBA_FLOOR)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


# ---------------- Training loop ---------------- #

def train_policy(
    bc_model: PolicyNet,
    model: DeltaPredictor,
    cohort: Sequence[Trajectory],
    config: PpoConfig,
    schema: FeatureSchema,
    reward: Optional[RewardParams] = None,
) -> Tuple[PolicyNet, List[Dict[str, float]]]:
    """Alternate model rollouts and policy updates; diagnostics per iteration."""
    policy = init_from_bc(bc_model)
    if config.iterations == 0:
        return policy, []
    rng = np.random.default_rng(config.seed)
    obs_lags, act_lags = cohort_lags(cohort, include_current_action=False)
    sample = rng.choice(len(obs_lags), size=min(config.kl_sample_size, len(obs_lags)), replace=False)
    kl_obs, kl_act = obs_lags[sample], act_lags[sample]

    diagnostics: List[Dict[str, float]] = []
    state = None
    for iteration in tqdm(range(config.iterations), desc=config.algorithm, leave=False):
        old_policy = copy.deepcopy(policy)
        batch = collect_model_rollouts(
            old_policy, model, cohort, config.rollouts_per_iteration, config.horizon,
            seed=int(np.random.SeedSequence([config.seed, iteration]).generate_state(1)[0]),
            schema=schema, reward=reward, stochastic=config.stochastic_dynamics,
        )
        if config.algorithm == "pg":
            policy, loss = reinforce_update(policy, batch, config.lr, config.gamma)
            policy.eval()
        else:
            policy, loss, state = ppo_update(policy, old_policy, batch, config, state)
        kl = kl_divergence(bc_model, policy, kl_obs, kl_act)
        mean_return = float(batch.returns(config.gamma).mean())
        diagnostics.append({"iteration": iteration + 1, "mean_return": mean_return, "kl": kl, "loss": loss})
        if kl > config.kl_alert:
            logger.warning(f"Iteration {iteration + 1}: KL from the behavior policy {kl:.4f} exceeds {config.kl_alert}")
    logger.info(f"{config.algorithm.upper()} finished: mean simulated return "
                f"{diagnostics[0]['mean_return']:.3f} -> {diagnostics[-1]['mean_return']:.3f}")
    return policy, diagnostics


def write_diagnostics_csv(diagnostics: List[Dict[str, float]], path: str | Path) -> Path:
    path = Path(path)
    pd.DataFrame(diagnostics, columns=["iteration", "mean_return", "kl", "loss"]).to_csv(path, index=False)
    return path

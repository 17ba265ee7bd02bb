"""Clinically guided reward and discounted returns.

Intermediate steps are scored on SOFA and lactate changes; the terminal step
carries +/- terminal_magnitude for survival or death.
"""
from __future__ import annotations
from typing import Sequence

import numpy as np

from utils.errors import DomainError, InsufficientDataError
from .schemas import RewardParams, FeatureSchema, SOFA_MAX
from .data_core import Trajectory


def intermediate_rewards(
    sofa_t: np.ndarray,
    sofa_t1: np.ndarray,
    lactate_t: np.ndarray,
    lactate_t1: np.ndarray,
    params: RewardParams,
) -> np.ndarray:
    """Elementwise reward for transitions s_t -> s_{t+1}."""
    sofa_t, sofa_t1, lactate_t, lactate_t1 = (
        np.asarray(v, dtype=float) for v in (sofa_t, sofa_t1, lactate_t, lactate_t1)
    )
    for values in (sofa_t, sofa_t1, lactate_t, lactate_t1):
        if not np.all(np.isfinite(values)):
            raise DomainError("reward inputs must be finite")
    for values in (sofa_t, sofa_t1):
        if np.any(values < 0) or np.any(values > SOFA_MAX):
            raise DomainError("SOFA must lie in [0, 24]")
    if np.any(lactate_t < 0) or np.any(lactate_t1 < 0):
        raise DomainError("lactate must be nonnegative")
    unchanged = (sofa_t1 == sofa_t) & (sofa_t1 > 0)
    return (
        params.c0 * unchanged
        + params.c1 * (sofa_t1 - sofa_t)
        + params.c2 * np.tanh(lactate_t1 - lactate_t)
    )


def intermediate_reward(
    sofa_t: float, sofa_t1: float, lactate_t: float, lactate_t1: float, params: RewardParams | None = None
) -> float:
    params = params or RewardParams()
    return float(intermediate_rewards(
        np.array([sofa_t]), np.array([sofa_t1]), np.array([lactate_t]), np.array([lactate_t1]), params
    )[0])


def terminal_reward(survived: bool, params: RewardParams | None = None) -> float:
    params = params or RewardParams()
    return params.terminal_magnitude if survived else -params.terminal_magnitude


def observation_rewards(obs_t: np.ndarray, obs_t1: np.ndarray, schema: FeatureSchema, params: RewardParams) -> np.ndarray:
    """Rewards for batches of raw observation pairs (..., d_raw)."""
    s, l = schema.sofa_index, schema.lactate_index
    return intermediate_rewards(obs_t[..., s], obs_t1[..., s], obs_t[..., l], obs_t1[..., l], params)


def trajectory_rewards(
    observations: np.ndarray, survived: bool | None, schema: FeatureSchema, params: RewardParams
) -> np.ndarray:
    """Per-step rewards of an episode: intermediate rewards, then the terminal outcome.

    Without a known outcome the last step gets 0.
    """
    rewards = np.zeros(len(observations))
    if len(observations) > 1:
        rewards[:-1] = observation_rewards(observations[:-1], observations[1:], schema, params)
    rewards[-1] = 0.0 if survived is None else terminal_reward(survived, params)
    return rewards


def recompute_rewards(traj: Trajectory, schema: FeatureSchema, params: RewardParams) -> Trajectory:
    return Trajectory(
        patient_id=traj.patient_id,
        observations=traj.observations,
        actions=traj.actions,
        rewards=trajectory_rewards(traj.observations, traj.survived, schema, params),
        survived=traj.survived,
        iv_doses=traj.iv_doses,
        vp_doses=traj.vp_doses,
        schema=schema,
    )


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=float)
    if gamma == 1.0:
        return float(np.sum(rewards))
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def trajectory_return(traj: Trajectory, gamma: float) -> float:
    return discounted_return(traj.rewards, gamma)


def behavior_value(cohort: Sequence[Trajectory], gamma: float) -> float:
    """Mean discounted return of the logged trajectories."""
    if not cohort:
        raise InsufficientDataError("cannot average returns over an empty cohort")
    return float(np.mean([trajectory_return(traj, gamma) for traj in cohort]))

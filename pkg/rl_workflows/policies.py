"""Policy interface shared by the simulator, policy search and evaluation.

A policy maps lag windows (obs_lags[n, 4, d_raw], act_lags[n, 4]) to a distribution
over the 25 joint actions. Lag 0 of act_lags is -1 when a policy is queried.
"""
from __future__ import annotations
from typing import Protocol, runtime_checkable

import numpy as np

from utils.errors import DomainError
from .schemas import N_ACTIONS


@runtime_checkable
class StochasticPolicy(Protocol):
    def action_proba(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        ...


def sample_actions(proba: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    cdf = np.cumsum(proba, axis=1)
    actions = (cdf <= uniforms[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(actions, N_ACTIONS - 1)


def log_proba_of(proba: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.log(proba[np.arange(len(actions)), actions])


def check_distribution(proba: np.ndarray, atol: float = 1e-9) -> None:
    if proba.ndim != 2 or proba.shape[1] != N_ACTIONS:
        raise DomainError(f"expected (n, {N_ACTIONS}) action probabilities, got {proba.shape}")
    if np.any(proba < 0) or not np.allclose(proba.sum(axis=1), 1.0, atol=atol):
        raise DomainError("action probabilities must be nonnegative and sum to 1")


class FixedPolicy:
    """Same distribution in every state."""

    def __init__(self, proba: np.ndarray):
        proba = np.asarray(proba, dtype=float)
        check_distribution(proba[None, :])
        self.proba = proba

    def action_proba(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        return np.tile(self.proba, (len(obs_lags), 1))

    @classmethod
    def uniform(cls) -> "FixedPolicy":
        return cls(np.full(N_ACTIONS, 1.0 / N_ACTIONS))

    @classmethod
    def deterministic(cls, action: int) -> "FixedPolicy":
        proba = np.zeros(N_ACTIONS)
        proba[action] = 1.0
        return cls(proba)

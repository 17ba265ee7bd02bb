"""Supervised model of the clinician policy, used to start policy search."""
from __future__ import annotations
import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from tqdm.auto import tqdm

from utils.errors import DomainError, InsufficientDataError, ShapeError
from .schemas import BcConfig, N_ACTIONS
from .data_core import Standardizer, Trajectory, cohort_lags, histories_from_lags
from .dynamics import DTYPE, make_adam_state, adam_step
from .policies import check_distribution

logger = logging.getLogger(__name__)

PROBA_FLOOR = 1e-12


class PolicyNet(nn.Module):
    """Two ReLU hidden layers, 25 action logits.

    Inputs are HistoryVectors over standardized observations with the current action slot empty.
    """

    def __init__(self, history_dim: int, hidden: Tuple[int, int] = (64, 64), l2: float = 1e-4,
                 standardizer: Optional[Standardizer] = None):
        super().__init__()
        h1, h2 = hidden
        self.history_dim = history_dim
        self.hidden = (h1, h2)
        self.l2 = l2
        self.fc1 = nn.Linear(history_dim, h1, dtype=DTYPE)
        self.fc2 = nn.Linear(h1, h2, dtype=DTYPE)
        self.out = nn.Linear(h2, N_ACTIONS, dtype=DTYPE)
        self.standardizer = standardizer

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(F.relu(self.fc2(F.relu(self.fc1(x)))))

    def histories(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        obs = obs_lags if self.standardizer is None else self.standardizer.apply(obs_lags)
        return histories_from_lags(obs, act_lags)

    def action_proba(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        return bc_predict_proba(self, self.histories(obs_lags, act_lags))

    def penalty(self) -> torch.Tensor:
        return sum(p.pow(2).sum() for name, p in self.named_parameters() if name.endswith("weight"))


def _history_tensor(model: PolicyNet, history) -> torch.Tensor:
    x = history if isinstance(history, torch.Tensor) else torch.as_tensor(np.asarray(history, dtype=float))
    x = x.to(DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.history_dim:
        raise ShapeError(f"expected histories of width {model.history_dim}, got {tuple(x.shape)}")
    return x


def bc_predict_proba(model: PolicyNet, history) -> np.ndarray:
    """Softmax of the logits; a single history gives a 25-vector."""
    single = np.ndim(history) == 1
    x = _history_tensor(model, history)
    with torch.no_grad():
        proba = torch.softmax(model(x), dim=1).numpy()
    return proba[0] if single else proba


def cross_entropy(proba: np.ndarray, label: int) -> float:
    proba = np.asarray(proba, dtype=float)
    check_distribution(proba[None, :])
    if not 0 <= label < N_ACTIONS:
        raise DomainError(f"label {label} outside 0..{N_ACTIONS - 1}")
    return float(-np.log(max(proba[label], PROBA_FLOOR)))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over rows of half the L1 distance between two batches of distributions."""
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=1).mean())


def bc_loss(model: PolicyNet, histories, labels) -> torch.Tensor:
    """Mean cross-entropy plus the L2 penalty on weights."""
    x = _history_tensor(model, histories)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return F.cross_entropy(model(x), y) + model.l2 * model.penalty()


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if np.any(labels < 0) or np.any(labels >= N_ACTIONS):
        raise DomainError(f"action labels must lie in 0..{N_ACTIONS - 1}")
    return labels


def _evaluate(model: PolicyNet, histories: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    model.eval()
    with torch.no_grad():
        logits = model(_history_tensor(model, histories))
        y = torch.as_tensor(labels, dtype=torch.long)
        loss = float(F.cross_entropy(logits, y))
        accuracy = float((logits.argmax(dim=1) == y).to(DTYPE).mean())
    return loss, accuracy


def bc_fit(
    train: Tuple[np.ndarray, np.ndarray],
    val: Tuple[np.ndarray, np.ndarray],
    config: BcConfig,
    standardizer: Optional[Standardizer] = None,
) -> Tuple[PolicyNet, List[Dict[str, float]]]:
    """Adam on cross-entropy + L2; returns the best-validation snapshot and per-epoch curves.

    With an empty validation set the snapshot is chosen on training loss.
    """
    X, y = np.asarray(train[0], dtype=float), _check_labels(train[1])
    Xv, yv = np.asarray(val[0], dtype=float), _check_labels(val[1])
    if len(X) == 0:
        raise InsufficientDataError("behavior cloning needs a nonempty training set")
    if len(X) != len(y) or len(Xv) != len(yv):
        raise ShapeError("histories and labels differ in length")
    torch.manual_seed(config.seed)
    model = PolicyNet(X.shape[1], config.hidden, config.l2, standardizer)
    params = dict(model.named_parameters())
    state = make_adam_state(params, lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    X_t = torch.as_tensor(X, dtype=DTYPE)
    y_t = torch.as_tensor(y, dtype=torch.long)

    curve: List[Dict[str, float]] = []
    best_loss, best_state = float("inf"), None
    for epoch in tqdm(range(config.epochs), desc="behavior", leave=False):
        model.train()
        total = 0.0
        for idx in torch.split(torch.randperm(len(X), generator=generator), config.batch_size):
            loss = bc_loss(model, X_t[idx], y_t[idx])
            grads = torch.autograd.grad(loss, list(params.values()))
            adam_step(params, dict(zip(params, grads)), state)
            total += float(loss.detach()) * len(idx)
        train_loss = total / len(X)
        if len(Xv):
            val_loss, val_accuracy = _evaluate(model, Xv, yv)
            score = val_loss
        else:
            val_loss, val_accuracy = float("nan"), float("nan")
            score = _evaluate(model, X, y)[0]
        curve.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "val_accuracy": val_accuracy})
        if score < best_loss:
            best_loss, best_state = score, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"Behavior policy fitted: best loss {best_loss:.4f} after {config.epochs} epochs")
    return model, curve


def bc_dataset(cohort: Sequence[Trajectory], standardizer: Standardizer) -> Tuple[np.ndarray, np.ndarray]:
    """Policy-query histories and the logged actions taken at them."""
    obs_lags, act_lags = cohort_lags(cohort, include_current_action=False)
    labels = np.concatenate([traj.actions for traj in cohort])
    return histories_from_lags(standardizer.apply(obs_lags), act_lags), labels


def fit_behavior(
    train_cohort: Sequence[Trajectory], val_cohort: Sequence[Trajectory],
    config: BcConfig, standardizer: Standardizer,
) -> Tuple[PolicyNet, List[Dict[str, float]]]:
    train = bc_dataset(train_cohort, standardizer)
    val = bc_dataset(val_cohort, standardizer) if val_cohort else (np.empty((0, train[0].shape[1])), np.empty(0, dtype=int))
    return bc_fit(train, val, config, standardizer)

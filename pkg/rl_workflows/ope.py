"""Off-policy evaluation: kNN behavior policy, fitted Q evaluation and the per-horizon estimators."""
from __future__ import annotations
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from sklearn.ensemble import RandomForestRegressor

from utils.errors import ConfigError, DivisionHazardError, InsufficientDataError, ShapeError
from .schemas import ForestConfig, HorizonGroup, OpeConfig, OpeDiagnostics, OpeReport, N_ACTIONS
from .data_core import (
    Standardizer, Trajectory, cohort_lags, fit_standardizer, initial_lags, one_hot_actions,
    states_from_lags, trajectory_lags,
)
from .policies import StochasticPolicy, check_distribution
from .reward import discounted_return

logger = logging.getLogger(__name__)


# ---------------- Behavior policy ---------------- #

@dataclass
class KnnBehavior:
    """Smoothed action frequencies among the k nearest logged states."""

    tree: cKDTree
    actions: np.ndarray
    standardizer: Standardizer
    k: int = 250
    alpha: float = 0.5

    @property
    def size(self) -> int:
        return len(self.actions)

    def action_proba(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        return knn_proba(self, states_from_lags(obs_lags))


def knn_fit(states: np.ndarray, actions: np.ndarray, k: int = 250, alpha: float = 0.5) -> KnnBehavior:
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=int)
    if states.ndim != 2 or len(states) != len(actions):
        raise ShapeError(f"states {states.shape} and actions {actions.shape} do not line up")
    if k < 1 or alpha < 0:
        raise ConfigError("kNN needs k >= 1 and alpha >= 0")
    if len(states) < k:
        raise InsufficientDataError(f"kNN reference set has {len(states)} states, fewer than k={k}")
    standardizer = fit_standardizer(states)
    return KnnBehavior(cKDTree(standardizer.apply(states)), actions, standardizer, k, alpha)


def knn_fit_cohort(cohort: Sequence[Trajectory], k: int = 250, alpha: float = 0.5) -> KnnBehavior:
    obs_lags, _ = cohort_lags(cohort)
    return knn_fit(states_from_lags(obs_lags), np.concatenate([t.actions for t in cohort]), k, alpha)


def _neighbors(model: KnnBehavior, queries: np.ndarray) -> np.ndarray:
    """k nearest reference indices per query; equal distances resolve to the lower index."""
    k = model.k
    n_query = min(k + 1, model.size)
    dist, idx = model.tree.query(queries, k=n_query)
    dist = np.reshape(dist, (len(queries), n_query))
    idx = np.reshape(idx, (len(queries), n_query))
    if n_query == k:
        return idx
    neighbors = idx[:, :k].copy()
    tied = np.nonzero(dist[:, k - 1] == dist[:, k])[0]
    for row in tied:
        boundary = dist[row, k - 1]
        candidates = np.asarray(model.tree.query_ball_point(queries[row], boundary * (1 + 1e-9)))
        d = np.linalg.norm(model.tree.data[candidates] - queries[row], axis=1)
        d = np.where(np.isclose(d, boundary, rtol=1e-9, atol=0), boundary, d)
        neighbors[row] = candidates[np.lexsort((candidates, d))][:k]
    return neighbors


def knn_proba(model: KnnBehavior, state: np.ndarray) -> np.ndarray:
    """(count of a among the k neighbours + alpha) / (k + 25 alpha); a query point may be its own neighbour."""
    state = np.asarray(state, dtype=float)
    single = state.ndim == 1
    queries = model.standardizer.apply(state[None, :] if single else state)
    neighbors = _neighbors(model, queries)
    counts = np.zeros((len(queries), N_ACTIONS))
    np.add.at(counts, (np.repeat(np.arange(len(queries)), model.k), model.actions[neighbors].ravel()), 1.0)
    proba = (counts + model.alpha) / (model.k + N_ACTIONS * model.alpha)
    return proba[0] if single else proba


# ---------------- Q estimation ---------------- #

class QFunction(Protocol):
    gamma: float

    def predict_all(self, states: np.ndarray) -> np.ndarray:
        """(m, 25) action values for StateVectors (m, state_dim)."""
        ...


def _q_inputs(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([states, one_hot_actions(np.asarray(actions)[:, None])[:, 0]], axis=1)


@dataclass
class ForestQ:
    forest: Optional[RandomForestRegressor]
    gamma: float
    n_iterations: int
    config: ForestConfig

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if self.forest is None:
            return np.zeros(len(states))
        return self.forest.predict(_q_inputs(states, actions))

    def predict_all(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        m = len(states)
        if self.forest is None:
            return np.zeros((m, N_ACTIONS))
        repeated = np.repeat(states, N_ACTIONS, axis=0)
        actions = np.tile(np.arange(N_ACTIONS), m)
        return self.predict(repeated, actions).reshape(m, N_ACTIONS)


@dataclass
class _Transitions:
    states: np.ndarray  # (m, state_dim)
    actions: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    next_states: np.ndarray
    next_proba: np.ndarray  # (m, 25) under the evaluation policy, zero rows at terminal steps


def _transitions(cohort: Sequence[Trajectory], eval_policy: StochasticPolicy) -> _Transitions:
    states, actions, rewards, terminal, next_obs, next_act = [], [], [], [], [], []
    for traj in cohort:
        obs_lags, _ = trajectory_lags(traj)
        query_obs, query_act = trajectory_lags(traj, include_current_action=False)
        succ = np.minimum(np.arange(traj.length) + 1, traj.length - 1)
        states.append(states_from_lags(obs_lags))
        actions.append(traj.actions)
        rewards.append(traj.rewards)
        terminal.append(traj.is_terminal)
        next_obs.append(query_obs[succ])
        next_act.append(query_act[succ])
    terminal = np.concatenate(terminal)
    next_obs = np.concatenate(next_obs)
    next_proba = eval_policy.action_proba(next_obs, np.concatenate(next_act))
    next_proba = np.where(terminal[:, None], 0.0, next_proba)
    data = _Transitions(
        states=np.concatenate(states), actions=np.concatenate(actions), rewards=np.concatenate(rewards),
        terminal=terminal, next_states=states_from_lags(next_obs), next_proba=next_proba,
    )
    # canonical sample order: the fitted forest is independent of cohort order
    keys = np.column_stack([data.states, data.actions, data.rewards, data.terminal, data.next_states])
    order = np.lexsort(keys.T[::-1])
    return _Transitions(*(getattr(data, f)[order] for f in
                          ("states", "actions", "rewards", "terminal", "next_states", "next_proba")))


def _forest(config: ForestConfig) -> RandomForestRegressor:
    return RandomForestRegressor(
        n_estimators=config.n_trees,
        max_depth=config.max_depth,
        min_samples_leaf=config.min_samples_leaf,
        max_features=config.max_features,
        bootstrap=config.bootstrap,
        random_state=config.seed,
    )


def fqi_fit(
    cohort: Sequence[Trajectory],
    eval_policy: StochasticPolicy,
    gamma: float,
    n_iterations: Optional[int] = None,
    config: Optional[ForestConfig] = None,
) -> ForestQ:
    """Fitted Q evaluation: regress r + gamma * E_{a'~pi_e} Q(s', a') on (s, a), r alone at terminal steps.

    The default iteration count is the longest episode in the cohort.
    """
    if not cohort:
        raise InsufficientDataError("cannot fit Q on an empty cohort")
    config = config or ForestConfig()
    n_iterations = max(t.length for t in cohort) if n_iterations is None else n_iterations
    if n_iterations < 0:
        raise ConfigError("n_iterations must be nonnegative")
    qhat = ForestQ(forest=None, gamma=gamma, n_iterations=0, config=config)
    if n_iterations == 0:
        return qhat
    data = _transitions(cohort, eval_policy)
    inputs = _q_inputs(data.states, data.actions)
    for iteration in range(n_iterations):
        bootstrap = np.sum(data.next_proba * qhat.predict_all(data.next_states), axis=1)
        targets = data.rewards + gamma * np.where(data.terminal, 0.0, bootstrap)
        forest = _forest(config).fit(inputs, targets)
        qhat = ForestQ(forest=forest, gamma=gamma, n_iterations=iteration + 1, config=config)
    logger.info(f"FQI finished {n_iterations} iterations on {len(data.rewards)} transitions")
    return qhat


# ---------------- Importance ratios ---------------- #

@dataclass
class StepRatios:
    """Per-step and cumulative importance ratios of one trajectory."""

    per_step: np.ndarray
    cumulative: np.ndarray
    n_clipped: int


def _policy_terms(
    cohort: Sequence[Trajectory], eval_policy: StochasticPolicy, behavior: StochasticPolicy
) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(eval proba (T,25), eval prob of taken action (T,), behavior prob of taken action (T,)) per trajectory."""
    obs_lags, act_lags = cohort_lags(cohort, include_current_action=False)
    actions = np.concatenate([t.actions for t in cohort])
    pi_e = eval_policy.action_proba(obs_lags, act_lags)
    pi_b = behavior.action_proba(obs_lags, act_lags)
    check_distribution(pi_e, atol=1e-8)
    rows = np.arange(len(actions))
    taken_e, taken_b = pi_e[rows, actions], pi_b[rows, actions]
    bounds = np.cumsum([0] + [t.length for t in cohort])
    return [(pi_e[a:b], taken_e[a:b], taken_b[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def _ratios(taken_e: np.ndarray, taken_b: np.ndarray, clip_max: float) -> StepRatios:
    if np.any(taken_b <= 0):
        raise DivisionHazardError("behavior policy gives zero probability to a logged action")
    raw = taken_e / taken_b
    # a zero evaluation probability stays zero; clipping bounds positive ratios only
    clipped = np.where(raw > 0, np.clip(raw, 1.0 / clip_max, clip_max), 0.0)
    n_clipped = int(np.sum((raw > 0) & (clipped != raw)))
    return StepRatios(per_step=clipped, cumulative=np.cumprod(clipped), n_clipped=n_clipped)


def is_ratios(traj: Trajectory, eval_policy: StochasticPolicy, behavior: StochasticPolicy,
              clip_max: float = 100.0) -> StepRatios:
    """Cumulative ratios rho_{0:t} with each per-step ratio clipped to [1/clip_max, clip_max]."""
    _, taken_e, taken_b = _policy_terms([traj], eval_policy, behavior)[0]
    return _ratios(taken_e, taken_b, clip_max)


# ---------------- Estimators ---------------- #

def _groups(cohort: Sequence[Trajectory]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = defaultdict(list)
    for i, traj in enumerate(cohort):
        groups[traj.length].append(i)
    return dict(sorted(groups.items()))


def _ess(weights: np.ndarray) -> float:
    total = np.sum(weights ** 2)
    return float(np.sum(weights) ** 2 / total) if total > 0 else 0.0


def _diagnostics(cohort: Sequence[Trajectory], ratios: List[StepRatios], groups: List[HorizonGroup]) -> OpeDiagnostics:
    final = np.array([r.cumulative[-1] for r in ratios])
    n_ratios = int(sum(len(r.per_step) for r in ratios))
    n_clipped = int(sum(r.n_clipped for r in ratios))
    return OpeDiagnostics(
        n_trajectories=len(cohort), groups=groups, ess=_ess(final), n_ratios=n_ratios, n_clipped=n_clipped,
        clip_fraction=n_clipped / n_ratios, weight_min=float(final.min()), weight_max=float(final.max()),
    )


def _combine(values: Dict[int, float], sizes: Dict[int, int]) -> float:
    if not values:
        raise InsufficientDataError("every horizon group has zero total weight")
    total = sum(sizes[h] for h in values)
    return float(sum(sizes[h] / total * values[h] for h in values))


def _ratio_table(cohort, eval_policy, behavior, clip_max):
    terms = _policy_terms(cohort, eval_policy, behavior)
    return terms, [_ratios(taken_e, taken_b, clip_max) for _, taken_e, taken_b in terms]


def _log_clipping(diagnostics: OpeDiagnostics) -> None:
    if diagnostics.n_clipped:
        logger.info(f"Clipped {diagnostics.n_clipped} of {diagnostics.n_ratios} importance ratios "
                    f"({diagnostics.clip_fraction:.2%})")


def estimate_phwis(
    cohort: Sequence[Trajectory], eval_policy: StochasticPolicy, behavior: StochasticPolicy,
    gamma: float, clip_max: float = 100.0,
) -> Tuple[float, OpeDiagnostics]:
    """Per-horizon weighted importance sampling."""
    if not cohort:
        raise InsufficientDataError("cannot evaluate on an empty cohort")
    _, ratios = _ratio_table(cohort, eval_policy, behavior, clip_max)
    returns = np.array([discounted_return(t.rewards, gamma) for t in cohort])
    final = np.array([r.cumulative[-1] for r in ratios])

    values, sizes, groups = {}, {}, []
    for horizon, members in _groups(cohort).items():
        w, R = final[members], returns[members]
        weight_sum = float(w.sum())
        sizes[horizon] = len(members)
        if weight_sum > 0:
            values[horizon] = float(np.dot(w, R) / weight_sum)
        groups.append(HorizonGroup(horizon=horizon, n=len(members), weight_sum=weight_sum, ess=_ess(w),
                                   dropped=weight_sum <= 0))
    diagnostics = _diagnostics(cohort, ratios, groups)
    _log_clipping(diagnostics)
    return _combine(values, sizes), diagnostics


def estimate_phwdr(
    cohort: Sequence[Trajectory], eval_policy: StochasticPolicy, behavior: StochasticPolicy,
    qhat: QFunction, gamma: float, clip_max: float = 100.0,
) -> Tuple[float, OpeDiagnostics]:
    """Per-horizon weighted doubly robust estimator with stepwise self-normalized weights."""
    if not cohort:
        raise InsufficientDataError("cannot evaluate on an empty cohort")
    if not np.isclose(qhat.gamma, gamma, rtol=0, atol=1e-12):
        raise ConfigError(f"Q estimate was fitted with gamma={qhat.gamma}, estimator uses gamma={gamma}")
    terms, ratios = _ratio_table(cohort, eval_policy, behavior, clip_max)
    obs_lags, _ = cohort_lags(cohort)
    q_all = qhat.predict_all(states_from_lags(obs_lags))
    bounds = np.cumsum([0] + [t.length for t in cohort])

    values, sizes, groups = {}, {}, []
    for horizon, members in _groups(cohort).items():
        rho = np.stack([ratios[i].cumulative for i in members])  # (n_l, horizon)
        col_sums = rho.sum(axis=0)
        w = np.divide(rho, col_sums, out=np.zeros_like(rho), where=col_sums > 0)
        w_prev = np.concatenate([np.full((len(members), 1), 1.0 / len(members)), w[:, :-1]], axis=1)
        rewards = np.stack([cohort[i].rewards for i in members])
        q_taken = np.stack([q_all[bounds[i]:bounds[i + 1]][np.arange(horizon), cohort[i].actions] for i in members])
        v_hat = np.stack([np.sum(terms[i][0] * q_all[bounds[i]:bounds[i + 1]], axis=1) for i in members])
        discounts = gamma ** np.arange(horizon)
        sizes[horizon] = len(members)
        weight_sum = float(col_sums[-1])
        if weight_sum > 0:
            values[horizon] = float(np.sum(discounts * (w * rewards - (w * q_taken - w_prev * v_hat))))
        groups.append(HorizonGroup(horizon=horizon, n=len(members), weight_sum=weight_sum,
                                   ess=_ess(rho[:, -1]), dropped=weight_sum <= 0))
    diagnostics = _diagnostics(cohort, ratios, groups)
    return _combine(values, sizes), diagnostics


def estimate_am(cohort: Sequence[Trajectory], eval_policy: StochasticPolicy, qhat: QFunction) -> float:
    """Mean over initial states of sum_a pi_e(a|s_0) Q(s_0, a)."""
    if not cohort:
        raise InsufficientDataError("cannot evaluate on an empty cohort")
    obs_lags, act_lags = initial_lags(cohort)
    proba = eval_policy.action_proba(obs_lags, act_lags)
    return float(np.mean(np.sum(proba * qhat.predict_all(states_from_lags(obs_lags)), axis=1)))


def evaluate_policy(
    cohort: Sequence[Trajectory],
    eval_policy: StochasticPolicy,
    config: OpeConfig,
    behavior: Optional[StochasticPolicy] = None,
    reference: Optional[Sequence[Trajectory]] = None,
    policy_label: Optional[str] = None,
    echo: Optional[Dict] = None,
) -> OpeReport:
    """All three estimators on `cohort`.

    The kNN behavior model and the Q estimate are fitted on `reference` (default: `cohort`);
    an exact `behavior` policy replaces the kNN model when given.
    """
    reference = reference if reference is not None else cohort
    if behavior is None:
        behavior = knn_fit_cohort(reference, config.k, config.alpha)
    qhat = fqi_fit(reference, eval_policy, config.gamma, config.fqi_iterations, config.forest)
    phwis, diagnostics = estimate_phwis(cohort, eval_policy, behavior, config.gamma, config.clip_max)
    phwdr, _ = estimate_phwdr(cohort, eval_policy, behavior, qhat, config.gamma, config.clip_max)
    am = estimate_am(cohort, eval_policy, qhat)
    echoed = {
        "gamma": config.gamma, "k": config.k, "alpha": config.alpha, "clip_max": config.clip_max,
        "fqi_iterations": qhat.n_iterations, "forest": config.forest.model_dump(),
        "exact_behavior": config.use_true_behavior or not isinstance(behavior, KnnBehavior),
    }
    echoed.update(echo or {})
    logger.info(f"OPE {policy_label or 'policy'}: PHWIS {phwis:.3f}, PHWDR {phwdr:.3f}, AM {am:.3f}")
    return OpeReport(policy_label=policy_label, phwis=phwis, phwdr=phwdr, am=am, diagnostics=diagnostics, config=echoed)

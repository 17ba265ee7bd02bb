"""Synthetic sepsis cohorts from a latent-severity MDP, plus a Monte-Carlo value oracle.

A scalar severity x drives every observed feature:
    SOFA = clamp(round(2x), 0, 24)
    lactate = max(softplus(x) + lactate noise, LACTATE_FLOOR)
    auxiliary features = offset + loading * x + noise
Transitions: x' = max(0, x + drift + effect[a] * tanh((x - pivot) / width) + noise).
Below the pivot treatment raises severity, above it treatment lowers it.
Death at episode end with probability sigmoid(mortality_slope * x_T + mortality_intercept).

Every patient draws from its own child of SeedSequence(seed), so generation does
not depend on iteration order and two policies simulated with the same seed share
all exogenous noise.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Any

import numpy as np
from scipy.special import expit, softmax

from utils.errors import ConfigError
from .schemas import SynthConfig, RewardParams, FeatureSchema, N_ACTIONS, N_BINS, N_LAGS, SOFA_MAX
from .data_core import (
    ActionBins, Trajectory, default_schema, DEFAULT_FEATURES, NO_ACTION, states_from_lags,
)
from .policies import StochasticPolicy, sample_actions
from .reward import trajectory_rewards, discounted_return

logger = logging.getLogger(__name__)

# Dose quartiles used to turn sampled bins into logged doses
# (IV fluid mL per 4h, max vasopressor mcg/kg/min).
SYNTH_BINS = ActionBins(iv_quartiles=(50.0, 180.0, 530.0), vp_quartiles=(0.08, 0.22, 0.45))

# name: (offset, loading on severity, noise scale)
AUX_EMISSION: Dict[str, Tuple[float, float, float]] = {
    "heart_rate": (80.0, 4.0, 8.0),
    "mean_bp": (85.0, -3.0, 6.0),
    "resp_rate": (16.0, 1.0, 3.0),
    "spo2": (98.0, -0.6, 1.5),
    "creatinine": (0.8, 0.25, 0.3),
    "bilirubin": (0.6, 0.2, 0.3),
    "platelets": (250.0, -15.0, 30.0),
    "wbc_count": (9.0, 0.8, 2.0),
    "gcs": (15.0, -0.8, 1.0),
    "shock_index": (0.7, 0.05, 0.1),
}

# Clinician dosing protocol: target bin for both drugs by SOFA regime.
CLINICIAN_LOW_MAX = 5
CLINICIAN_HIGH_MIN = 15
CLINICIAN_TARGETS = (0, 1, 3)

# mmol/L, assay detection limit
LACTATE_FLOOR = 0.1

_IV_BIN = np.arange(N_ACTIONS) // N_BINS
_VP_BIN = np.arange(N_ACTIONS) % N_BINS


@dataclass(frozen=True)
class GroundTruth:
    config: SynthConfig
    schema: FeatureSchema
    bins: ActionBins
    reward: RewardParams

    @property
    def effect(self) -> np.ndarray:
        return np.asarray(self.config.treatment_effect, dtype=float).reshape(N_ACTIONS)

    def clinician_policy(self) -> "ClinicianPolicy":
        return ClinicianPolicy(self)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(),
            "schema": self.schema.model_dump(),
            "bins": self.bins.to_dict(),
            "reward": self.reward.model_dump(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GroundTruth":
        return cls(
            config=SynthConfig(**payload["config"]),
            schema=FeatureSchema(**payload["schema"]),
            bins=ActionBins.from_dict(payload["bins"]),
            reward=RewardParams(**payload["reward"]),
        )


def build_ground_truth(config: SynthConfig, reward: Optional[RewardParams] = None) -> GroundTruth:
    return GroundTruth(config=config, schema=default_schema(), bins=SYNTH_BINS, reward=reward or RewardParams())


# ---------------- Clinician ---------------- #

def clinician_targets(sofa: np.ndarray) -> np.ndarray:
    low, medium, high = CLINICIAN_TARGETS
    return np.where(sofa <= CLINICIAN_LOW_MAX, low, np.where(sofa >= CLINICIAN_HIGH_MIN, high, medium))


def clinician_action_proba(truth: GroundTruth, state: np.ndarray) -> np.ndarray:
    """Severity-dependent softmax over the 25 actions for StateVector input (n, 4*d_raw) or (4*d_raw,)."""
    state = np.asarray(state, dtype=float)
    single = state.ndim == 1
    states = state[None, :] if single else state
    sofa = states[:, truth.schema.sofa_index]  # lag-0 block comes first
    target = clinician_targets(sofa)[:, None]
    scores = -(np.abs(_IV_BIN[None, :] - target) + np.abs(_VP_BIN[None, :] - target))
    proba = softmax(scores / truth.config.clinician_temperature, axis=1)
    return proba[0] if single else proba


class ClinicianPolicy:
    """The simulator's own behaviour policy."""

    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def action_proba(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        return clinician_action_proba(self.truth, states_from_lags(obs_lags))


# ---------------- Simulation ---------------- #

@dataclass
class _Noise:
    x0: np.ndarray  # (n,)
    lengths: np.ndarray  # (n,)
    transition: np.ndarray  # (n, H)
    lactate: np.ndarray  # (n, H)
    aux: np.ndarray  # (n, H, n_aux)
    action_u: np.ndarray  # (n, H)
    dose_u: np.ndarray  # (n, H, 2)
    death_u: np.ndarray  # (n,)


def _draw_noise(config: SynthConfig, n: int, seed: int) -> _Noise:
    H, n_aux = config.max_horizon, len(AUX_EMISSION)
    children = np.random.SeedSequence(seed).spawn(n)
    per_patient = []
    for child in children:
        rng = np.random.default_rng(child)
        per_patient.append((
            rng.standard_normal(),
            rng.integers(config.min_horizon, config.max_horizon + 1),
            rng.standard_normal(H),
            rng.standard_normal(H),
            rng.standard_normal((H, n_aux)),
            rng.random(H),
            rng.random((H, 2)),
            rng.random(),
        ))
    columns = list(zip(*per_patient))
    z0 = np.asarray(columns[0])
    return _Noise(
        x0=np.maximum(config.initial_severity_mean + config.initial_severity_std * z0, 0.0),
        lengths=np.asarray(columns[1], dtype=int),
        transition=np.stack(columns[2]),
        lactate=np.stack(columns[3]),
        aux=np.stack(columns[4]),
        action_u=np.stack(columns[5]),
        dose_u=np.stack(columns[6]),
        death_u=np.asarray(columns[7]),
    )


def emit_observations(truth: GroundTruth, x: np.ndarray, lactate_noise: np.ndarray, aux_noise: np.ndarray) -> np.ndarray:
    """Observation rows (n, d_raw) for latent severities x (n,)."""
    cfg = truth.config
    obs = np.empty((len(x), truth.schema.d_raw))
    obs[:, truth.schema.sofa_index] = np.clip(np.round(2.0 * x), 0, SOFA_MAX)
    obs[:, truth.schema.lactate_index] = np.maximum(
        np.logaddexp(0.0, x) + cfg.lactate_noise_std * lactate_noise, LACTATE_FLOOR)
    for j, name in enumerate(AUX_EMISSION):
        offset, loading, scale = AUX_EMISSION[name]
        obs[:, DEFAULT_FEATURES.index(name)] = offset + loading * x + cfg.aux_noise_std * scale * aux_noise[:, j]
    return obs


def severity_step(truth: GroundTruth, x: np.ndarray, actions: np.ndarray, noise: np.ndarray) -> np.ndarray:
    cfg = truth.config
    modulation = np.tanh((x - cfg.effect_pivot) / cfg.effect_width)
    return np.maximum(x + cfg.severity_drift + truth.effect[actions] * modulation + cfg.noise_std * noise, 0.0)


def _doses(truth: GroundTruth, actions: np.ndarray, dose_u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    doses = []
    for bins, quartiles, u in ((_IV_BIN[actions], truth.bins.iv_quartiles, dose_u[..., 0]),
                               (_VP_BIN[actions], truth.bins.vp_quartiles, dose_u[..., 1])):
        edges = np.array([0.0, *quartiles, 2.0 * quartiles[2]])
        lower = edges[np.maximum(bins - 1, 0)]
        upper = edges[bins]
        dose = upper - u * (upper - lower)  # in (lower, upper]
        dose = np.maximum(dose, np.nextafter(lower, np.inf))
        doses.append(np.where(bins == 0, 0.0, dose))
    return doses[0], doses[1]


def simulate_episodes(
    truth: GroundTruth, policy: StochasticPolicy, n: int, seed: int, with_doses: bool = True
) -> List[Trajectory]:
    """Roll the latent MDP forward under `policy` for n patients."""
    H = truth.config.max_horizon
    noise = _draw_noise(truth.config, n, seed)
    d = truth.schema.d_raw
    x = noise.x0.copy()
    observations = np.empty((n, H, d))
    actions = np.empty((n, H), dtype=int)
    x_path = np.empty((n, H + 1))
    x_path[:, 0] = x
    obs_lags = np.empty((n, N_LAGS, d))
    act_lags = np.full((n, N_LAGS), NO_ACTION)
    for t in range(H):
        obs_t = emit_observations(truth, x, noise.lactate[:, t], noise.aux[:, t])
        observations[:, t] = obs_t
        if t == 0:
            obs_lags[:] = obs_t[:, None, :]
        else:
            obs_lags = np.concatenate([obs_t[:, None, :], obs_lags[:, :-1]], axis=1)
            act_lags = np.concatenate([np.full((n, 1), NO_ACTION), act_lags[:, :-1]], axis=1)
        proba = policy.action_proba(obs_lags, act_lags)
        a_t = sample_actions(proba, noise.action_u[:, t])
        actions[:, t] = a_t
        act_lags[:, 0] = a_t
        x = severity_step(truth, x, a_t, noise.transition[:, t])
        x_path[:, t + 1] = x

    x_final = x_path[np.arange(n), noise.lengths]
    p_death = expit(truth.config.mortality_slope * x_final + truth.config.mortality_intercept)
    survived = noise.death_u >= p_death
    iv_doses, vp_doses = _doses(truth, actions, noise.dose_u) if with_doses else (None, None)

    cohort = []
    for i in range(n):
        L = int(noise.lengths[i])
        obs_i = observations[i, :L].copy()
        cohort.append(Trajectory(
            patient_id=f"synth-{i:06d}",
            observations=obs_i,
            actions=actions[i, :L].copy(),
            rewards=trajectory_rewards(obs_i, bool(survived[i]), truth.schema, truth.reward),
            survived=bool(survived[i]),
            iv_doses=None if iv_doses is None else iv_doses[i, :L].copy(),
            vp_doses=None if vp_doses is None else vp_doses[i, :L].copy(),
            schema=truth.schema,
        ))
    return cohort


def generate_cohort(config: SynthConfig, reward: Optional[RewardParams] = None) -> Tuple[List[Trajectory], GroundTruth]:
    if not isinstance(config, SynthConfig):
        raise ConfigError("generate_cohort expects a SynthConfig")
    truth = build_ground_truth(config, reward)
    cohort = simulate_episodes(truth, truth.clinician_policy(), config.n_patients, config.seed)
    survival = np.mean([traj.survived for traj in cohort])
    logger.info(f"Generated {len(cohort)} synthetic patients (survival {survival:.3f}, seed {config.seed})")
    return cohort, truth


def true_policy_value(
    truth: GroundTruth, policy: StochasticPolicy, n_rollouts: int, gamma: float, seed: int
) -> Tuple[float, float]:
    """Mean and standard error of discounted returns from fresh simulations under `policy`."""
    if n_rollouts < 1:
        raise ConfigError("n_rollouts must be at least 1")
    if not 0 <= gamma <= 1:
        raise ConfigError("gamma must lie in [0, 1]")
    episodes = simulate_episodes(truth, policy, n_rollouts, seed, with_doses=False)
    returns = np.array([discounted_return(traj.rewards, gamma) for traj in episodes])
    std_error = float(returns.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(returns.mean()), std_error

"""Cohort data model: trajectories, action binning, standardization, lag windows and CSV I/O.

Observations are kept in raw units everywhere; models standardize on the way in.
A lag window holds the observation and action at t, t-1, t-2, t-3. Lags before the
episode start repeat the first observation and carry action -1 (an all-zero one-hot).
"""
from __future__ import annotations
import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Dict, Any

import numpy as np
import pandas as pd
from pydantic import ValidationError

from utils.errors import ConfigError, DomainError, InsufficientDataError, ParseError, DataError
from .schemas import FeatureSchema, N_ACTIONS, N_BINS, N_LAGS, SOFA_MAX

logger = logging.getLogger(__name__)

NO_ACTION = -1
MIN_NONZERO_DOSES = 4

DEFAULT_FEATURES = [
    "sofa", "arterial_lactate", "heart_rate", "mean_bp", "resp_rate", "spo2",
    "creatinine", "bilirubin", "platelets", "wbc_count", "gcs", "shock_index",
]

EXTENDED_FEATURES = [
    # demographics / static
    "shock_index", "elixhauser", "sirs", "gender", "re_admission", "gcs", "sofa", "age",
    # lab values
    "albumin", "arterial_ph", "calcium", "glucose", "hemoglobin", "magnesium", "ptt",
    "potassium", "sgpt", "arterial_blood_gas", "bun", "chloride", "bicarbonate", "inr",
    "sodium", "arterial_lactate", "co2", "creatinine", "ionised_calcium", "pt",
    "platelets_count", "sgot", "total_bilirubin", "wbc_count",
    # vital signs
    "diastolic_bp", "systolic_bp", "mean_bp", "paco2", "pao2", "fio2", "pao2_fio2_ratio",
    "resp_rate", "temperature_c", "weight_kg", "heart_rate", "spo2",
    # intake / output
    "fluid_output_4h", "total_fluid_output", "mechanical_ventilation",
    "timestep",
]

CSV_LEADING = ["patient_id", "t"]
CSV_TRAILING = ["iv_dose", "vp_dose", "reward", "terminal", "survived"]


# ---------------- Schema ---------------- #

def default_schema() -> FeatureSchema:
    return FeatureSchema(names=DEFAULT_FEATURES, sofa_index=0, lactate_index=1)


def extended_schema() -> FeatureSchema:
    """The full 48-entry physiological feature list."""
    return FeatureSchema(
        names=EXTENDED_FEATURES,
        sofa_index=EXTENDED_FEATURES.index("sofa"),
        lactate_index=EXTENDED_FEATURES.index("arterial_lactate"),
    )


def load_schema(path: str | Path) -> FeatureSchema:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return FeatureSchema(**json.load(f))
    except FileNotFoundError:
        raise ConfigError(f"schema file not found: {path}")
    except (json.JSONDecodeError, ValidationError, TypeError) as e:
        raise ConfigError(f"invalid schema file {path}: {e}")


def write_schema(schema: FeatureSchema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(schema.model_dump(), f, indent=2)


# ---------------- Actions ---------------- #

@dataclass(frozen=True)
class Action:
    iv_bin: int
    vp_bin: int

    def __post_init__(self):
        if not (0 <= self.iv_bin < N_BINS and 0 <= self.vp_bin < N_BINS):
            raise DomainError(f"action bins out of range: ({self.iv_bin}, {self.vp_bin})")

    @property
    def flat_index(self) -> int:
        return N_BINS * self.iv_bin + self.vp_bin

    @classmethod
    def from_flat(cls, flat_index: int) -> "Action":
        if not 0 <= flat_index < N_ACTIONS:
            raise DomainError(f"flat action index out of range: {flat_index}")
        return cls(flat_index // N_BINS, flat_index % N_BINS)

    @classmethod
    def from_bins(cls, iv_bin: int, vp_bin: int) -> "Action":
        return cls(iv_bin, vp_bin)


@dataclass(frozen=True)
class ActionBins:
    iv_quartiles: Tuple[float, float, float]
    vp_quartiles: Tuple[float, float, float]

    def __post_init__(self):
        for name, q in (("iv", self.iv_quartiles), ("vp", self.vp_quartiles)):
            if len(q) != 3 or not (0 < q[0] <= q[1] <= q[2]) or not all(math.isfinite(v) for v in q):
                raise DomainError(f"{name} quartiles must be positive and nondecreasing, got {q}")

    def to_dict(self) -> Dict[str, List[float]]:
        return {"iv_quartiles": list(self.iv_quartiles), "vp_quartiles": list(self.vp_quartiles)}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ActionBins":
        return cls(tuple(payload["iv_quartiles"]), tuple(payload["vp_quartiles"]))


def _nearest_rank_quartiles(values: np.ndarray) -> Tuple[float, float, float]:
    ordered = np.sort(values)
    n = len(ordered)
    return tuple(float(ordered[math.ceil(p * n) - 1]) for p in (0.25, 0.5, 0.75))


def fit_action_bins(raw_doses: Sequence[Tuple[float, float]]) -> ActionBins:
    """Nearest-rank quartiles of the nonzero doses of each drug."""
    doses = np.asarray(raw_doses, dtype=float).reshape(-1, 2)
    quartiles = []
    for column, name in ((0, "iv"), (1, "vp")):
        nonzero = doses[:, column][doses[:, column] > 0]
        if len(nonzero) < MIN_NONZERO_DOSES:
            raise InsufficientDataError(
                f"need at least {MIN_NONZERO_DOSES} nonzero {name} doses to fit quartiles, got {len(nonzero)}"
            )
        quartiles.append(_nearest_rank_quartiles(nonzero))
    return ActionBins(quartiles[0], quartiles[1])


def bin_dose(dose: float, quartiles: Tuple[float, float, float]) -> int:
    if not math.isfinite(dose) or dose < 0:
        raise DomainError(f"dose must be finite and nonnegative, got {dose}")
    if dose == 0:
        return 0
    q1, q2, q3 = quartiles
    if dose <= q1:
        return 1
    if dose <= q2:
        return 2
    if dose <= q3:
        return 3
    return 4


def bin_doses(iv_doses: np.ndarray, vp_doses: np.ndarray, bins: ActionBins) -> np.ndarray:
    """Flat action indices for paired dose arrays."""
    iv = np.array([bin_dose(float(d), bins.iv_quartiles) for d in iv_doses], dtype=int)
    vp = np.array([bin_dose(float(d), bins.vp_quartiles) for d in vp_doses], dtype=int)
    return N_BINS * iv + vp


# ---------------- Standardizer ---------------- #

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Standardizer":
        return cls(np.asarray(payload["mean"], dtype=float), np.asarray(payload["std"], dtype=float))

    @classmethod
    def identity(cls, d_raw: int) -> "Standardizer":
        return cls(np.zeros(d_raw), np.ones(d_raw))


def fit_standardizer(observations: Sequence[np.ndarray] | np.ndarray) -> Standardizer:
    """Per-feature mean and population std; zero-variance features get std 1."""
    if len(observations) == 0:
        raise InsufficientDataError("cannot fit a standardizer on zero observations")
    stacked = np.asarray(observations, dtype=float).reshape(len(observations), -1)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Standardizer(mean, std)


def apply_standardizer(standardizer: Standardizer, obs: np.ndarray) -> np.ndarray:
    return standardizer.apply(obs)


def cohort_observations(cohort: Sequence["Trajectory"]) -> np.ndarray:
    if not cohort:
        raise InsufficientDataError("cohort is empty")
    return np.concatenate([traj.observations for traj in cohort], axis=0)


# ---------------- Trajectory ---------------- #

def validate_observations(observations: np.ndarray, schema: FeatureSchema) -> None:
    if observations.ndim != 2 or observations.shape[1] != schema.d_raw:
        raise DomainError(f"observations must have shape (T, {schema.d_raw}), got {observations.shape}")
    if not np.all(np.isfinite(observations)):
        raise DomainError("observations contain non-finite values")
    sofa = observations[:, schema.sofa_index]
    if np.any(sofa < 0) or np.any(sofa > SOFA_MAX):
        raise DomainError("SOFA entries must lie in [0, 24]")
    if np.any(observations[:, schema.lactate_index] < 0):
        raise DomainError("lactate entries must be nonnegative")


@dataclass(frozen=True)
class Trajectory:
    """One patient episode. The last step is the terminal step."""

    patient_id: str
    observations: np.ndarray  # (T, d_raw)
    actions: np.ndarray  # (T,) flat indices
    rewards: np.ndarray  # (T,)
    survived: Optional[bool] = None
    iv_doses: Optional[np.ndarray] = field(default=None, compare=False)
    vp_doses: Optional[np.ndarray] = field(default=None, compare=False)
    # SOFA and lactate ranges are checked only when the schema is known
    schema: Optional[FeatureSchema] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        T = len(self.actions)
        if T < 1:
            raise DataError(f"trajectory {self.patient_id} is empty")
        if self.observations.ndim != 2 or self.observations.shape[0] != T or len(self.rewards) != T:
            raise DataError(f"trajectory {self.patient_id}: observations, actions and rewards disagree in length")
        if not np.all(np.isfinite(self.observations)):
            raise DomainError(f"trajectory {self.patient_id}: observations contain non-finite values")
        if self.schema is not None:
            try:
                validate_observations(self.observations, self.schema)
            except DomainError as e:
                raise DomainError(f"trajectory {self.patient_id}: {e.detail}")
        if np.any(self.actions < 0) or np.any(self.actions >= N_ACTIONS):
            raise DomainError(f"trajectory {self.patient_id}: action index out of range")
        if not np.all(np.isfinite(self.rewards)):
            raise DataError(f"trajectory {self.patient_id}: rewards must be finite")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def is_terminal(self) -> np.ndarray:
        flags = np.zeros(self.length, dtype=bool)
        flags[-1] = True
        return flags

    def steps(self) -> List[Tuple[np.ndarray, Action, float, bool]]:
        terminal = self.is_terminal
        return [
            (self.observations[t], Action.from_flat(int(self.actions[t])), float(self.rewards[t]), bool(terminal[t]))
            for t in range(self.length)
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.survived == other.survived
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
        )


# ---------------- Lag windows ---------------- #

def trajectory_lags(traj: Trajectory, include_current_action: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Lag windows for every timestep: obs (T, 4, d_raw) and actions (T, 4)."""
    src = np.arange(traj.length)[:, None] - np.arange(N_LAGS)[None, :]
    padded = src < 0
    idx = np.maximum(src, 0)
    obs_lags = traj.observations[idx]
    act_lags = np.where(padded, NO_ACTION, traj.actions[idx])
    if not include_current_action:
        act_lags[:, 0] = NO_ACTION
    return obs_lags, act_lags


def cohort_lags(cohort: Sequence[Trajectory], include_current_action: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked lag windows of every step of every trajectory, in cohort order."""
    if not cohort:
        raise InsufficientDataError("cohort is empty")
    pairs = [trajectory_lags(traj, include_current_action) for traj in cohort]
    return np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs])


def initial_lags(cohort: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray]:
    """Policy windows at t=0 of each trajectory."""
    if not cohort:
        raise InsufficientDataError("cohort is empty")
    obs = np.stack([np.repeat(traj.observations[:1], N_LAGS, axis=0) for traj in cohort])
    return obs, np.full((len(cohort), N_LAGS), NO_ACTION)


def one_hot_actions(act_lags: np.ndarray) -> np.ndarray:
    """(n, 4) action indices, -1 for none, to (n, 4, 25) one-hot blocks."""
    act_lags = np.asarray(act_lags, dtype=int)
    onehot = np.zeros(act_lags.shape + (N_ACTIONS,))
    rows, lags = np.nonzero(act_lags >= 0)
    onehot[rows, lags, act_lags[rows, lags]] = 1.0
    return onehot


def states_from_lags(obs_lags: np.ndarray) -> np.ndarray:
    return np.asarray(obs_lags, dtype=float).reshape(len(obs_lags), -1)


def histories_from_lags(obs_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
    blocks = np.concatenate([np.asarray(obs_lags, dtype=float), one_hot_actions(act_lags)], axis=2)
    return blocks.reshape(len(blocks), -1)


def _check_timestep(traj: Trajectory, t: int) -> None:
    if not 0 <= t < traj.length:
        raise IndexError(f"timestep {t} out of range for trajectory of length {traj.length}")


def build_state(traj: Trajectory, t: int) -> np.ndarray:
    """StateVector: observations at t, t-1, t-2, t-3, padded with the first observation."""
    _check_timestep(traj, t)
    obs_lags, _ = trajectory_lags(traj)
    return states_from_lags(obs_lags[t:t + 1])[0]


def build_history(traj: Trajectory, t: int, include_current_action: bool = True) -> np.ndarray:
    """HistoryVector: (observation, one-hot action) for lags 0..3."""
    _check_timestep(traj, t)
    obs_lags, act_lags = trajectory_lags(traj, include_current_action)
    return histories_from_lags(obs_lags[t:t + 1], act_lags[t:t + 1])[0]


# ---------------- Splitting ---------------- #

def split_cohort(
    cohort: Sequence[Trajectory], fractions: Sequence[float], seed: int
) -> Tuple[List[Trajectory], List[Trajectory], List[Trajectory]]:
    """Patient-level split. Sizes are floored, then the remainder goes to the largest fractional parts."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(cohort)
    raw = [f * n for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    remainder = n - sum(sizes)
    by_fraction = sorted(range(3), key=lambda i: -(raw[i] - sizes[i]))
    for i in by_fraction[:remainder]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [cohort[i] for i in order]
    train = shuffled[: sizes[0]]
    val = shuffled[sizes[0]: sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1]:]
    logger.info(f"Split {n} trajectories into train/val/test = {len(train)}/{len(val)}/{len(test)}")
    return train, val, test


# ---------------- CSV I/O ---------------- #

def csv_columns(schema: FeatureSchema) -> List[str]:
    return CSV_LEADING + list(schema.names) + CSV_TRAILING


def write_cohort_csv(cohort: Sequence[Trajectory], path: str | Path, schema: FeatureSchema) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = []
    for traj in cohort:
        if traj.iv_doses is None or traj.vp_doses is None:
            raise DataError(f"trajectory {traj.patient_id} has no recorded doses to write")
        frame = pd.DataFrame(traj.observations, columns=list(schema.names))
        frame.insert(0, "t", np.arange(traj.length))
        frame.insert(0, "patient_id", traj.patient_id)
        frame["iv_dose"] = traj.iv_doses
        frame["vp_dose"] = traj.vp_doses
        frame["reward"] = traj.rewards
        frame["terminal"] = traj.is_terminal.astype(int)
        frame["survived"] = pd.array([None if traj.survived is None else int(traj.survived)] * traj.length, dtype="Int64")
        frames.append(frame)
    if frames:
        pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    else:
        pd.DataFrame(columns=csv_columns(schema)).to_csv(path, index=False)
    logger.info(f"Wrote {len(cohort)} trajectories to {path}")
    return path


def _first_bad_row(mask: np.ndarray) -> int:
    # header is row 1
    return int(np.flatnonzero(mask)[0]) + 2


def read_cohort_csv(path: str | Path, schema: FeatureSchema, bins: Optional[ActionBins] = None) -> List[Trajectory]:
    """Parse a cohort CSV. Action bins are fitted from the file's doses when not supplied."""
    try:
        frame = pd.read_csv(path, dtype={"patient_id": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed CSV {path}: {e}")
    except FileNotFoundError:
        raise ParseError(f"cohort file not found: {path}")

    expected = csv_columns(schema)
    unknown = [c for c in frame.columns if c not in expected]
    if unknown:
        raise ParseError(f"unknown column(s) {unknown}", row=1)
    missing = [c for c in expected if c not in frame.columns]
    if missing:
        raise ParseError(f"missing column(s) {missing}", row=1)
    if frame.empty:
        return []

    numeric: Dict[str, np.ndarray] = {}
    for col in expected[1:]:
        values = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(values)
        if col == "survived":
            blank = frame[col].isna().to_numpy()
            bad = bad & ~blank
        if bad.any():
            raise ParseError(f"column '{col}' has a missing, non-numeric or non-finite value", row=_first_bad_row(bad))
        numeric[col] = values
    if frame["patient_id"].isna().any():
        raise ParseError("missing patient_id", row=_first_bad_row(frame["patient_id"].isna().to_numpy()))

    sofa = numeric[schema.names[schema.sofa_index]]
    out_of_range = (sofa < 0) | (sofa > SOFA_MAX)
    if out_of_range.any():
        raise ParseError("SOFA outside [0, 24]", row=_first_bad_row(out_of_range))
    negative = numeric[schema.names[schema.lactate_index]] < 0
    negative |= (numeric["iv_dose"] < 0) | (numeric["vp_dose"] < 0)
    if negative.any():
        raise ParseError("negative lactate or dose", row=_first_bad_row(negative))
    for col in ("terminal", "survived"):
        flags = numeric[col]
        invalid = np.isfinite(flags) & (flags != 0) & (flags != 1)
        if invalid.any():
            raise ParseError(f"column '{col}' must be 0 or 1", row=_first_bad_row(invalid))

    if bins is None:
        bins = fit_action_bins(np.column_stack([numeric["iv_dose"], numeric["vp_dose"]]))
        logger.info(f"Fitted action bins from {path}: {bins.to_dict()}")

    features = np.column_stack([numeric[name] for name in schema.names])
    cohort: List[Trajectory] = []
    rows_by_patient = frame.groupby("patient_id", sort=False).indices
    for patient_id in pd.unique(frame["patient_id"]):
        rows = np.asarray(rows_by_patient[patient_id])
        rows = rows[np.argsort(numeric["t"][rows], kind="stable")]
        t = numeric["t"][rows]
        if not np.array_equal(t, np.arange(len(rows))):
            raise ParseError(f"patient {patient_id}: timesteps must run 0..{len(rows) - 1}", row=int(rows[0]) + 2)
        terminal = numeric["terminal"][rows]
        expected_terminal = np.zeros(len(rows))
        expected_terminal[-1] = 1
        if not np.array_equal(terminal, expected_terminal):
            bad = int(rows[np.flatnonzero(terminal != expected_terminal)[0]])
            raise ParseError(f"patient {patient_id}: exactly the last step must be terminal", row=bad + 2)
        survived_values = numeric["survived"][rows]
        if np.all(np.isnan(survived_values)):
            survived = None
        elif np.all(survived_values == survived_values[0]):
            survived = bool(survived_values[0])
        else:
            raise ParseError(f"patient {patient_id}: inconsistent survived flag", row=int(rows[0]) + 2)
        iv = numeric["iv_dose"][rows]
        vp = numeric["vp_dose"][rows]
        cohort.append(Trajectory(
            patient_id=str(patient_id),
            observations=features[rows],
            actions=bin_doses(iv, vp, bins),
            rewards=numeric["reward"][rows],
            survived=survived,
            iv_doses=iv,
            vp_doses=vp,
            schema=schema,
        ))
    logger.info(f"Read {len(cohort)} trajectories from {path}")
    return cohort

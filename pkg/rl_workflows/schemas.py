from __future__ import annotations
import math
from typing import List, Optional, Dict, Any, Literal, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

N_ACTIONS = 25
N_BINS = 5
N_LAGS = 4
SOFA_MAX = 24


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FeatureSchema(StrictModel):
    names: List[str]
    sofa_index: int = Field(..., ge=0)
    lactate_index: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _check_indices(self) -> "FeatureSchema":
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if self.sofa_index >= len(self.names) or self.lactate_index >= len(self.names):
            raise ValueError("sofa_index and lactate_index must address a listed feature")
        if self.sofa_index == self.lactate_index:
            raise ValueError("sofa_index and lactate_index must differ")
        return self

    @property
    def d_raw(self) -> int:
        return len(self.names)

    @property
    def state_dim(self) -> int:
        return N_LAGS * self.d_raw

    @property
    def history_dim(self) -> int:
        return N_LAGS * (self.d_raw + N_ACTIONS)


class RewardParams(StrictModel):
    c0: float = -0.025
    c1: float = -0.125
    c2: float = -2.0
    terminal_magnitude: float = Field(15.0, gt=0)
    gamma: float = Field(0.99, gt=0, le=1)


# Moderate doses of either drug (bins 2-3) carry the largest severity reduction,
# the top bin gives some of it back.
DRUG_EFFECT = [0.0, -0.1, -0.25, -0.25, -0.15]
DEFAULT_TREATMENT_EFFECT = [[DRUG_EFFECT[iv] + DRUG_EFFECT[vp] for vp in range(N_BINS)] for iv in range(N_BINS)]


class SynthConfig(StrictModel):
    n_patients: int = Field(2000, ge=1)
    max_horizon: int = Field(12, ge=2)  # 4h steps, 48h
    min_horizon: int = Field(4, ge=1)
    severity_drift: float = 0.15
    treatment_effect: List[List[float]] = Field(default_factory=lambda: [row[:] for row in DEFAULT_TREATMENT_EFFECT])
    effect_pivot: float = 3.0  # latent severity where treatment turns from harmful to helpful
    effect_width: float = Field(1.0, gt=0)
    noise_std: float = Field(0.3, gt=0)
    lactate_noise_std: float = Field(0.2, ge=0)
    aux_noise_std: float = Field(0.5, ge=0)
    initial_severity_mean: float = 4.5
    initial_severity_std: float = Field(1.5, ge=0)
    clinician_temperature: float = Field(1.0, gt=0)
    mortality_slope: float = 0.8
    mortality_intercept: float = -5.0
    seed: int = 0

    @field_validator("treatment_effect")
    @classmethod
    def _five_by_five(cls, value: List[List[float]]) -> List[List[float]]:
        if len(value) != N_BINS or any(len(row) != N_BINS for row in value):
            raise ValueError("treatment_effect must be a 5x5 matrix")
        if not all(math.isfinite(v) for row in value for v in row):
            raise ValueError("treatment_effect entries must be finite")
        return value

    @model_validator(mode="after")
    def _check_horizons(self) -> "SynthConfig":
        if self.min_horizon > self.max_horizon:
            raise ValueError("min_horizon must not exceed max_horizon")
        return self


class BlendSpec(StrictModel):
    low: Literal["clinician", "learned"] = "clinician"
    medium: Literal["clinician", "learned"] = "learned"
    high: Literal["clinician", "learned"] = "clinician"
    sofa_low_max: int = 5
    sofa_high_min: int = 15

    @model_validator(mode="after")
    def _check_thresholds(self) -> "BlendSpec":
        if not (0 <= self.sofa_low_max < self.sofa_high_min <= SOFA_MAX):
            raise ValueError("need 0 <= sofa_low_max < sofa_high_min <= 24")
        return self

    def label(self, learned_name: str = "PPO") -> str:
        names = {"clinician": "Clinician", "learned": learned_name}
        return " / ".join(names[r] for r in (self.low, self.medium, self.high))


# Row order of the severity-stratified comparison table.
BLEND_ROWS: List[Tuple[str, str, str]] = [
    ("learned", "learned", "learned"),
    ("learned", "learned", "clinician"),
    ("clinician", "learned", "clinician"),
    ("learned", "clinician", "learned"),
    ("clinician", "clinician", "clinician"),
]


class DynamicsConfig(StrictModel):
    model: Literal["mlp", "linear"] = "mlp"
    hidden: Tuple[int, int] = (128, 128)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(1e-3, gt=0)
    ridge_lambda: float = Field(1e-3, ge=0)
    seed: int = 0


class BcConfig(StrictModel):
    hidden: Tuple[int, int] = (64, 64)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    l2: float = Field(1e-4, ge=0)
    seed: int = 0


class PpoConfig(StrictModel):
    algorithm: Literal["pg", "ppo"] = "ppo"
    clip_epsilon: float = Field(0.2, gt=0, lt=1)
    lr: float = Field(1e-5, ge=0)  # small, to stay close to the cloned clinician
    iterations: int = Field(50, ge=0)
    rollouts_per_iteration: int = Field(256, ge=1)
    horizon: int = Field(10, ge=1)
    epochs: int = Field(4, ge=1)
    gamma: float = Field(0.99, gt=0, le=1)
    stochastic_dynamics: bool = False
    kl_alert: float = Field(0.5, gt=0)
    kl_sample_size: int = Field(2000, ge=1)
    seed: int = 0


class ForestConfig(StrictModel):
    n_trees: int = Field(80, ge=1)
    max_depth: int = Field(12, ge=1)
    min_samples_leaf: int = Field(5, ge=1)
    bootstrap: bool = True
    max_features: str = "sqrt"
    seed: int = 0


class OpeConfig(StrictModel):
    k: int = Field(250, ge=1)
    alpha: float = Field(0.5, ge=0)
    clip_max: float = Field(100.0, gt=1)
    gamma: float = Field(0.99, gt=0, le=1)
    fqi_iterations: Optional[int] = Field(None, ge=0)  # None: longest horizon in the cohort
    forest: ForestConfig = Field(default_factory=ForestConfig)
    use_true_behavior: bool = False


class HorizonGroup(BaseModel):
    horizon: int
    n: int
    weight_sum: float
    ess: float
    dropped: bool = False


class OpeDiagnostics(BaseModel):
    n_trajectories: int
    groups: List[HorizonGroup] = []
    ess: float
    n_ratios: int
    n_clipped: int
    clip_fraction: float
    weight_min: float
    weight_max: float


class OpeReport(BaseModel):
    policy_label: Optional[str] = None
    phwis: float
    phwdr: float
    am: float
    diagnostics: OpeDiagnostics
    config: Dict[str, Any] = {}

    @model_validator(mode="after")
    def _finite(self) -> "OpeReport":
        for name in ("phwis", "phwdr", "am"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} estimate is not finite")
        return self

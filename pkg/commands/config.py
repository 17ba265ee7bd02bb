"""Pipeline configuration and run manifest."""
from __future__ import annotations
import json
import os
from pathlib import Path
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from utils.artifacts import load_json, save_json, utc_timestamp
from utils.errors import ConfigError
from rl_workflows.schemas import (
    BcConfig, BlendSpec, DynamicsConfig, OpeConfig, PpoConfig, RewardParams, StrictModel, SynthConfig,
)

TOOL_VERSION = "1.0.0"
MANIFEST_NAME = "run_manifest.json"


class IngestConfig(StrictModel):
    cohort_csv: Optional[str] = None  # default: <out>/cohort.csv
    schema_path: Optional[str] = None  # default: <out>/schema.json, else the built-in schema
    bins_path: Optional[str] = None  # default: <out>/action_bins.json, else fitted from the cohort
    fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    recompute_rewards: bool = False


class RolloutExportConfig(StrictModel):
    n_trajectories: int = Field(10, ge=1)
    horizon: int = Field(10, ge=1)
    seed: int = 0


class PipelineConfig(StrictModel):
    """Every stage section plus the global seed, discount and output directory.

    A stage runs with seed = global seed + its section seed. The global gamma, when set,
    replaces the gamma of the reward, policy and evaluation sections.
    """

    seed: int = 0
    gamma: Optional[float] = Field(None, gt=0, le=1)
    out_dir: str = Field(default_factory=lambda: os.getenv("MBRL_OUTPUT_DIR", "outputs"))
    max_workers: int = Field(5, ge=1)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    reward: RewardParams = Field(default_factory=RewardParams)
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    dynamics: DynamicsConfig = Field(default_factory=DynamicsConfig)
    behavior: BcConfig = Field(default_factory=BcConfig)
    policy: PpoConfig = Field(default_factory=PpoConfig)
    blend: BlendSpec = Field(default_factory=BlendSpec)
    evaluate: OpeConfig = Field(default_factory=OpeConfig)
    rollout_export: RolloutExportConfig = Field(default_factory=RolloutExportConfig)

    @model_validator(mode="after")
    def _apply_gamma(self) -> "PipelineConfig":
        if self.gamma is not None:
            self.reward.gamma = self.gamma
            self.policy.gamma = self.gamma
            self.evaluate.gamma = self.gamma
        return self

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def stage_seed(self, section_seed: int) -> int:
        return self.seed + section_seed


def _key_path(error: dict) -> str:
    return ".".join(str(part) for part in error["loc"]) or "<root>"


def parse_pipeline_config(payload: dict) -> PipelineConfig:
    try:
        return PipelineConfig(**payload)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"invalid config key '{_key_path(first)}': {first['msg']}")
    except TypeError as e:
        raise ConfigError(f"invalid config: {e}")


def load_pipeline_config(path: Optional[str | Path] = None, seed: Optional[int] = None,
                         out: Optional[str | Path] = None) -> PipelineConfig:
    """Read a JSON config (defaults when no path), then apply CLI overrides."""
    payload: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")
    if seed is not None:
        payload["seed"] = seed
    if out is not None:
        payload["out_dir"] = str(out)
    return parse_pipeline_config(payload)


# ---------------- Manifest ---------------- #

class StageRecord(BaseModel):
    stage: str
    stage_key: str
    config_hash: str
    seed: int
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    finished_at: str


class RunManifest(BaseModel):
    tool_version: str = TOOL_VERSION
    stages: Dict[str, StageRecord] = {}
    updated_at: Optional[str] = None

    def producer_hash(self, path: str) -> Optional[str]:
        """Hash recorded for `path` by the stage that wrote it, if any."""
        for record in self.stages.values():
            if path in record.outputs:
                return record.outputs[path]
        return None


def load_manifest(out_dir: Path) -> RunManifest:
    path = out_dir / MANIFEST_NAME
    if not path.exists():
        return RunManifest()
    try:
        return RunManifest(**load_json(path))
    except ValidationError as e:
        raise ConfigError(f"{path} is not a valid run manifest: {e.errors()[0]['msg']}")


def save_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    manifest.updated_at = utc_timestamp()
    return save_json(manifest.model_dump(), out_dir / MANIFEST_NAME)

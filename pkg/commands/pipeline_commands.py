"""Pipeline stages: one function per subcommand, plus the argparse wiring.

Each stage checks its inputs, skips itself when the manifest shows identical inputs,
configuration and seed with intact outputs, and records input/output hashes when it runs.
"""
from __future__ import annotations
import argparse
import concurrent.futures
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.artifacts import OutputLock, hash_file, hash_payload, load_json, save_json, utc_timestamp
from utils.errors import DependencyError, InsufficientDataError
from rl_workflows.schemas import BLEND_ROWS, BlendSpec, FeatureSchema
from rl_workflows.data_core import (
    ActionBins, Standardizer, Trajectory, cohort_observations, default_schema, fit_action_bins,
    fit_standardizer, load_schema, read_cohort_csv, split_cohort, write_cohort_csv, write_schema,
)
from rl_workflows.reward import recompute_rewards
from rl_workflows.cohort_synth import GroundTruth, generate_cohort
from rl_workflows.dynamics import fit_dynamics, replay_logged, rollout_frame
from rl_workflows.behavior_clone import fit_behavior
from rl_workflows.policy_opt import blend, train_policy, write_diagnostics_csv
from rl_workflows.ope import evaluate_policy, knn_fit_cohort
from rl_workflows.model_io import load_model, save_model
from .config import PipelineConfig, RunManifest, StageRecord, load_manifest, load_pipeline_config, save_manifest

logger = logging.getLogger(__name__)

LEARNED_NAME = "PPO"


@dataclass
class StageContext:
    """What a stage body needs: the config, its output directory, its seed and config hash."""

    config: PipelineConfig
    out: Path
    seed: int
    config_hash: str

    def stamp(self) -> Dict[str, object]:
        return {"config_hash": self.config_hash, "seed": self.seed}


def _artifact_key(path: Path, out: Path) -> str:
    try:
        return str(path.resolve().relative_to(out.resolve()))
    except ValueError:
        return str(path.resolve())


def run_stage(
    name: str,
    config: PipelineConfig,
    sections: Sequence[str],
    section_seed: int,
    inputs: Sequence[Path],
    outputs: Sequence[str],
    body: Callable[[StageContext], None],
    force: bool = False,
) -> str:
    """Run `body` under the output lock; returns "completed" or "up-to-date"."""
    out = config.out
    with OutputLock(out):
        manifest = load_manifest(out)
        missing = [str(p) for p in inputs if not Path(p).exists()]
        if missing:
            raise DependencyError(f"stage {name} is missing upstream artifact(s): {', '.join(missing)}")

        input_hashes = {_artifact_key(Path(p), out): hash_file(p) for p in inputs}
        for key, digest in input_hashes.items():
            recorded = manifest.producer_hash(key)
            if recorded is not None and recorded != digest:
                if not force:
                    raise DependencyError(f"input {key} changed since it was produced; rerun its stage or pass --force")
                logger.warning(f"Using modified input {key} (--force)")

        seed = config.stage_seed(section_seed)
        stage_config = {section: getattr(config, section).model_dump(mode="json") for section in sections}
        config_hash = hash_payload(stage_config)
        stage_key = hash_payload({"stage": name, "config": stage_config, "seed": seed, "inputs": input_hashes})

        record = manifest.stages.get(name)
        if not force and record is not None and record.stage_key == stage_key and _outputs_intact(out, record):
            logger.info(f"Stage {name}: up-to-date")
            return "up-to-date"

        logger.info(f"Stage {name}: running (seed {seed})")
        body(StageContext(config=config, out=out, seed=seed, config_hash=config_hash))
        manifest.stages[name] = StageRecord(
            stage=name, stage_key=stage_key, config_hash=config_hash, seed=seed, inputs=input_hashes,
            outputs={o: hash_file(out / o) for o in outputs}, finished_at=utc_timestamp(),
        )
        save_manifest(manifest, out)
        logger.info(f"Stage {name}: completed")
        return "completed"


def _outputs_intact(out: Path, record: StageRecord) -> bool:
    return all((out / o).exists() and hash_file(out / o) == digest for o, digest in record.outputs.items())


# ---------------- Shared loaders ---------------- #

@dataclass
class Prepared:
    schema: FeatureSchema
    bins: ActionBins
    standardizer: Standardizer


def _load_prepared(out: Path) -> Prepared:
    payload = load_json(out / "standardizer.json")
    return Prepared(
        schema=FeatureSchema(**payload["schema"]),
        bins=ActionBins.from_dict(payload["bins"]),
        standardizer=Standardizer.from_dict(payload["standardizer"]),
    )


def _read_split(out: Path, name: str, prepared: Prepared) -> List[Trajectory]:
    return read_cohort_csv(out / f"{name}.csv", prepared.schema, prepared.bins)


def _write_curve(rows: List[Dict[str, float]], columns: List[str], path: Path) -> None:
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


# ---------------- Stages ---------------- #

def cmd_synth(config: PipelineConfig, force: bool = False) -> str:
    def body(ctx: StageContext) -> None:
        synth = ctx.config.synth.model_copy(update={"seed": ctx.seed})
        cohort, truth = generate_cohort(synth, ctx.config.reward)
        write_cohort_csv(cohort, ctx.out / "cohort.csv", truth.schema)
        save_json({**ctx.stamp(), **truth.to_dict()}, ctx.out / "ground_truth.json")
        save_json({**ctx.stamp(), **truth.bins.to_dict()}, ctx.out / "action_bins.json")
        write_schema(truth.schema, ctx.out / "schema.json")

    outputs = ["cohort.csv", "ground_truth.json", "action_bins.json", "schema.json"]
    return run_stage("synth", config, ["synth", "reward"], config.synth.seed, [], outputs, body, force)


def _ingest_paths(config: PipelineConfig) -> Tuple[Path, Optional[Path], Optional[Path]]:
    out, ingest = config.out, config.ingest
    cohort_csv = Path(ingest.cohort_csv) if ingest.cohort_csv else out / "cohort.csv"
    schema = Path(ingest.schema_path) if ingest.schema_path else out / "schema.json"
    bins = Path(ingest.bins_path) if ingest.bins_path else out / "action_bins.json"
    schema = schema if (ingest.schema_path or schema.exists()) else None
    bins = bins if (ingest.bins_path or bins.exists()) else None
    return cohort_csv, schema, bins


def cmd_ingest(config: PipelineConfig, force: bool = False) -> str:
    cohort_csv, schema_path, bins_path = _ingest_paths(config)

    def body(ctx: StageContext) -> None:
        schema = load_schema(schema_path) if schema_path else default_schema()
        bins = ActionBins.from_dict(load_json(bins_path)) if bins_path else None
        cohort = read_cohort_csv(cohort_csv, schema, bins)
        if not cohort:
            raise InsufficientDataError(f"cohort {cohort_csv} holds no trajectories")
        if bins is None:
            bins = fit_action_bins(np.column_stack([
                np.concatenate([t.iv_doses for t in cohort]), np.concatenate([t.vp_doses for t in cohort]),
            ]))
        if ctx.config.ingest.recompute_rewards:
            cohort = [recompute_rewards(t, schema, ctx.config.reward) for t in cohort]
        train, val, test = split_cohort(cohort, ctx.config.ingest.fractions, ctx.seed)
        for name, split in (("train", train), ("val", val), ("test", test)):
            write_cohort_csv(split, ctx.out / f"{name}.csv", schema)
        standardizer = fit_standardizer(cohort_observations(train))
        save_json({
            **ctx.stamp(), "standardizer": standardizer.to_dict(), "schema": schema.model_dump(), "bins": bins.to_dict(),
        }, ctx.out / "standardizer.json")

    inputs = [p for p in (cohort_csv, schema_path, bins_path) if p is not None]
    outputs = ["train.csv", "val.csv", "test.csv", "standardizer.json"]
    return run_stage("ingest", config, ["ingest", "reward"], 0, inputs, outputs, body, force)


def cmd_fit_dynamics(config: PipelineConfig, force: bool = False) -> str:
    out = config.out

    def body(ctx: StageContext) -> None:
        prepared = _load_prepared(ctx.out)
        train, val = _read_split(ctx.out, "train", prepared), _read_split(ctx.out, "val", prepared)
        settings = ctx.config.dynamics.model_copy(update={"seed": ctx.seed})
        model, curve = fit_dynamics(train, val, settings, prepared.standardizer)
        save_model(model, ctx.out / "dynamics_model.json", {**ctx.stamp(), "model": settings.model})
        _write_curve(curve, ["epoch", "train_mse", "val_mse"], ctx.out / "dynamics_metrics.csv")

    inputs = [out / "train.csv", out / "val.csv", out / "standardizer.json"]
    return run_stage("fit-dynamics", config, ["dynamics"], config.dynamics.seed, inputs,
                     ["dynamics_model.json", "dynamics_metrics.csv"], body, force)


def cmd_fit_behavior(config: PipelineConfig, force: bool = False) -> str:
    out = config.out

    def body(ctx: StageContext) -> None:
        prepared = _load_prepared(ctx.out)
        train, val = _read_split(ctx.out, "train", prepared), _read_split(ctx.out, "val", prepared)
        settings = ctx.config.behavior.model_copy(update={"seed": ctx.seed})
        model, curve = fit_behavior(train, val, settings, prepared.standardizer)
        save_model(model, ctx.out / "behavior_model.json", {**ctx.stamp(), "l2": settings.l2})
        _write_curve(curve, ["epoch", "train_loss", "val_loss", "val_accuracy"], ctx.out / "behavior_metrics.csv")

    inputs = [out / "train.csv", out / "val.csv", out / "standardizer.json"]
    return run_stage("fit-behavior", config, ["behavior"], config.behavior.seed, inputs,
                     ["behavior_model.json", "behavior_metrics.csv"], body, force)


def cmd_train_policy(config: PipelineConfig, force: bool = False) -> str:
    out = config.out

    def body(ctx: StageContext) -> None:
        prepared = _load_prepared(ctx.out)
        dynamics = load_model(ctx.out / "dynamics_model.json", ("linear_dynamics", "mlp_dynamics"))
        behavior = load_model(ctx.out / "behavior_model.json", "policy_net")
        train = _read_split(ctx.out, "train", prepared)
        settings = ctx.config.policy.model_copy(update={"seed": ctx.seed})
        policy, diagnostics = train_policy(behavior, dynamics, train, settings, prepared.schema, ctx.config.reward)
        save_model(policy, ctx.out / "policy_model.json", {**ctx.stamp(), "algorithm": settings.algorithm})
        write_diagnostics_csv(diagnostics, ctx.out / "policy_metrics.csv")

    inputs = [out / "dynamics_model.json", out / "behavior_model.json", out / "train.csv", out / "standardizer.json"]
    return run_stage("train-policy", config, ["policy", "reward"], config.policy.seed, inputs,
                     ["policy_model.json", "policy_metrics.csv"], body, force)


def _display(component: str) -> str:
    return "Clinician" if component == "clinician" else LEARNED_NAME


def cmd_evaluate(config: PipelineConfig, force: bool = False) -> str:
    out = config.out

    def body(ctx: StageContext) -> None:
        prepared = _load_prepared(ctx.out)
        learned = load_model(ctx.out / "policy_model.json", "policy_net")
        train, test = _read_split(ctx.out, "train", prepared), _read_split(ctx.out, "test", prepared)
        settings = ctx.config.evaluate.model_copy(
            update={"forest": ctx.config.evaluate.forest.model_copy(update={"seed": ctx.seed})})
        if settings.use_true_behavior:
            truth = GroundTruth.from_dict(load_json(ctx.out / "ground_truth.json"))
            clinician = behavior = truth.clinician_policy()
        else:
            clinician = load_model(ctx.out / "behavior_model.json", "policy_net")
            behavior = knn_fit_cohort(train, settings.k, settings.alpha)
        thresholds = {"sofa_low_max": ctx.config.blend.sofa_low_max, "sofa_high_min": ctx.config.blend.sofa_high_min}

        def evaluate_row(row: Tuple[str, str, str]):
            spec = BlendSpec(low=row[0], medium=row[1], high=row[2], **thresholds)
            policy = blend(clinician, learned, spec, prepared.schema)
            return evaluate_policy(test, policy, settings, behavior=behavior, reference=train,
                                   policy_label=spec.label(LEARNED_NAME), echo={**thresholds, "seed": ctx.seed})

        results = []
        with concurrent.futures.ThreadPoolExecutor(max_workers=ctx.config.max_workers) as executor:
            future_to_row = {executor.submit(evaluate_row, row): i for i, row in enumerate(BLEND_ROWS)}
            for future in concurrent.futures.as_completed(future_to_row):
                i = future_to_row[future]
                try:
                    results.append((i, future.result()))
                except Exception as exc:
                    logger.error(f"Blend row {i + 1} generated an exception: {exc}")
                    raise
        # threads finish out of order
        results.sort(key=lambda r: r[0])

        table, summary, rows = [], [], []
        for i, report in results:
            low, medium, high = (_display(c) for c in BLEND_ROWS[i])
            table.append({"low": low, "medium": medium, "high": high,
                          "phwis": report.phwis, "phwdr": report.phwdr, "am": report.am})
            diag = report.diagnostics
            for estimator in ("phwis", "phwdr", "am"):
                summary.append({"blend": report.policy_label, "estimator": estimator, "value": getattr(report, estimator),
                                "ess": diag.ess, "clip_fraction": diag.clip_fraction})
            rows.append({"blend": dict(zip(("low", "medium", "high"), BLEND_ROWS[i])), "report": report.model_dump()})
        save_json({**ctx.stamp(), "rows": rows}, ctx.out / "ope_report.json")
        _write_curve(table, ["low", "medium", "high", "phwis", "phwdr", "am"], ctx.out / "ope_table.csv")
        _write_curve(summary, ["blend", "estimator", "value", "ess", "clip_fraction"], ctx.out / "ope_summary.csv")

    inputs = [out / "policy_model.json", out / "behavior_model.json", out / "train.csv", out / "test.csv",
              out / "standardizer.json"]
    if config.evaluate.use_true_behavior:
        inputs.append(out / "ground_truth.json")
    return run_stage("evaluate", config, ["evaluate", "blend"], config.evaluate.forest.seed, inputs,
                     ["ope_report.json", "ope_table.csv", "ope_summary.csv"], body, force)


def cmd_rollout_export(config: PipelineConfig, force: bool = False) -> str:
    out = config.out

    def body(ctx: StageContext) -> None:
        prepared = _load_prepared(ctx.out)
        model = load_model(ctx.out / "dynamics_model.json", ("linear_dynamics", "mlp_dynamics"))
        val = _read_split(ctx.out, "val", prepared)
        settings = ctx.config.rollout_export
        rng = np.random.default_rng(ctx.seed)
        chosen = np.sort(rng.choice(len(val), size=min(settings.n_trajectories, len(val)), replace=False))
        sofa = prepared.schema.sofa_index
        traces, features = [], []
        for i in chosen:
            traj = val[i]
            result = replay_logged(model, traj, prepared.schema, settings.horizon, ctx.config.reward)
            if result is None:
                continue
            actual = traj.observations[: result.horizon + 1]
            for t in range(result.horizon + 1):
                traces.append({"patient_id": traj.patient_id, "t": t,
                               "sofa_pred": result.observations[t, sofa], "sofa_actual": actual[t, sofa]})
            frame = rollout_frame(result, prepared.schema, actual)
            frame.insert(0, "patient_id", traj.patient_id)
            features.append(frame)
        _write_curve(traces, ["patient_id", "t", "sofa_pred", "sofa_actual"], ctx.out / "rollouts.csv")
        columns = ["patient_id", "t", "feature", "predicted", "actual"]
        (pd.concat(features, ignore_index=True) if features else pd.DataFrame(columns=columns)).to_csv(
            ctx.out / "rollout_features.csv", index=False)

    inputs = [out / "dynamics_model.json", out / "val.csv", out / "standardizer.json"]
    return run_stage("rollout-export", config, ["rollout_export", "reward"], config.rollout_export.seed, inputs,
                     ["rollouts.csv", "rollout_features.csv"], body, force)


# ---------------- CLI wiring ---------------- #

COMMANDS: Dict[str, Tuple[Callable[[PipelineConfig, bool], str], str]] = {
    "synth": (cmd_synth, "Generate a synthetic sepsis cohort with known ground truth"),
    "ingest": (cmd_ingest, "Validate a cohort CSV, split it and fit the standardizer"),
    "fit-dynamics": (cmd_fit_dynamics, "Fit the environment model"),
    "fit-behavior": (cmd_fit_behavior, "Clone the clinician policy"),
    "train-policy": (cmd_train_policy, "Improve the cloned policy inside the environment model"),
    "evaluate": (cmd_evaluate, "Off-policy evaluation of the five clinician/learned blends"),
    "rollout-export": (cmd_rollout_export, "Export predicted vs logged SOFA traces"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Model-based offline RL pipeline for sepsis treatment")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="Pipeline config JSON (default: built-in defaults)")
        sub.add_argument("--seed", type=int, help="Global seed, overrides the config file")
        sub.add_argument("--out", help="Output directory (default: $MBRL_OUTPUT_DIR or ./outputs)")
        sub.add_argument("--force", action="store_true", help="Rerun even when up-to-date; accept modified inputs")
    return parser


def run_command(args: argparse.Namespace) -> str:
    config = load_pipeline_config(args.config, seed=args.seed, out=args.out)
    command, _ = COMMANDS[args.command]
    return command(config, args.force)

"""Experiment orchestration: dataset generation, method-by-tier runs,
hyperparameter sweeps, and results tables.

A run grid is a set of (method, tier, seed) cells. Cells are independent
and internally deterministic: the dataset comes off disk, the split uses
one shared seed so every tier evaluates the identical prompts, and the
per-cell seed drives batch order, filtering, and evaluation draws.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import (
    ABLATION_AMP_ONLY,
    ABLATION_FULL,
    ABLATION_REG_ONLY,
    BETA_DPO,
    DPO,
    IPO,
    MADPO,
    LossKind,
    WeightConfig,
)
from .optim import OptimizerConfig
from .policy import ReferencePolicy, eval_prompts_from_records, per_prompt_best_of_k_rewards, save_policy
from .trainer import BetaDpoConfig, TrainConfig, TwoStepResult, config_hash, train_policy, two_step_pipeline
from .world import (
    TIERS,
    DatasetBuilder,
    GroundTruthOracle,
    dataset_hash,
    load_dataset,
    save_dataset,
    shuffle_and_split,
)

METHOD_DPO = "dpo"
METHOD_IPO = "ipo"
METHOD_BETA_DPO = "beta_dpo"
METHOD_MADPO = "madpo"
METHOD_MADPO_AMP = "madpo_amp"
METHOD_MADPO_REG = "madpo_reg"
METHODS = (METHOD_DPO, METHOD_IPO, METHOD_BETA_DPO, METHOD_MADPO, METHOD_MADPO_AMP, METHOD_MADPO_REG)

_MADPO_ABLATIONS = {
    METHOD_MADPO: ABLATION_FULL,
    METHOD_MADPO_AMP: ABLATION_AMP_ONLY,
    METHOD_MADPO_REG: ABLATION_REG_ONLY,
}

ENV_PREFIX = "MADPO_"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Everything a run grid needs, with provenance hashing.

    Defaults follow the reference protocol scaled to desk size: 1,200
    pairs per tier split 1,000/200 with one shared shuffle, a fixed
    temperature of 0.1, transition sharpness 1, and the dampening floor
    at the reciprocal of the amplification ceiling.
    """

    out_dir: str = "runs"
    tiers: tuple = TIERS
    methods: tuple = (METHOD_DPO, METHOD_MADPO)
    seeds: tuple = (0, 1, 2, 3, 4)
    # world
    dataset_seed: int = 7
    oracle_seed: int = 0
    n_pairs: int = 1200
    train_fraction: float = 5.0 / 6.0
    split_seed: int = 11
    # shared training settings (tuned on the low tier, fixed thereafter)
    beta: float = 0.1
    epochs: int = 8
    batch_size: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    k_candidates: int = 8
    # adaptive weight
    threshold: float = 7.0
    c_max: float = 2.0
    sharpness: float = 1.0
    # reward model
    rm_learning_rate: float = 0.1
    rm_max_epochs: int = 300
    rm_patience: int = 5
    # batch-adaptive baseline
    bdpo_m: float = 0.6
    bdpo_h0: float = 0.0
    bdpo_keep_fraction: float = 0.8
    bdpo_sigma_init: float = 1.0
    bdpo_momentum: float = 0.9
    bdpo_beta_floor: float | None = None
    # sweeps
    tau_grid: tuple = (2.0, 4.0, 7.0, 10.0)
    c_grid: tuple = (2.0, 3.0, 4.0)

    def __post_init__(self) -> None:
        self.tiers = tuple(self.tiers)
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        for tier in self.tiers:
            if tier not in TIERS:
                raise ConfigError(f"unknown tier {tier!r}")
        for method in self.methods:
            if method not in METHODS:
                raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(c <= 1.0 for c in self.c_grid):
            raise ConfigError("amplification grid entries must exceed 1")
        if not self.tau_grid or not self.c_grid:
            raise ConfigError("sweep grids must be non-empty")

    @property
    def c_min(self) -> float:
        return 1.0 / self.c_max

    def hash(self) -> str:
        return config_hash(self)

    def weight_config(self) -> WeightConfig:
        return WeightConfig(c_min=self.c_min, c_max=self.c_max,
                            sharpness=self.sharpness, threshold=self.threshold)

    def rm_params(self) -> dict:
        return {"learning_rate": self.rm_learning_rate, "max_epochs": self.rm_max_epochs,
                "patience": self.rm_patience}

    @classmethod
    def from_sources(cls, config_path=None, env=None, overrides=None) -> "ExperimentConfig":
        """Defaults, then config file, then environment, then CLI flags."""
        values: dict = {}
        if config_path:
            try:
                values.update(json.loads(Path(config_path).read_text()))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        env = os.environ if env is None else env
        for key in cls.__dataclass_fields__:
            env_key = ENV_PREFIX + key.upper()
            if env_key in env:
                values[key] = _parse_env(env[env_key], cls.__dataclass_fields__[key].type)
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _parse_env(raw: str, annotation: str):
    raw = raw.strip()
    if "," in raw or annotation == "tuple":
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        converted = []
        for p in parts:
            try:
                converted.append(json.loads(p))
            except json.JSONDecodeError:
                converted.append(p)
        return tuple(converted)
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


@dataclass
class CellResult:
    method: str
    tier: str
    seed: int
    mean_reward: float
    std_error: float
    report: dict = field(default_factory=dict)


# -- dataset generation ------------------------------------------------------


def generate_datasets(cfg: ExperimentConfig) -> dict:
    """Write one dataset file per tier plus a manifest; idempotent."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    oracle = GroundTruthOracle.from_seed(cfg.oracle_seed)
    builder = DatasetBuilder(oracle)
    manifest: dict = {
        "config_hash": cfg.hash(),
        "dataset_seed": cfg.dataset_seed,
        "oracle_seed": cfg.oracle_seed,
        "n_pairs": cfg.n_pairs,
        "tiers": {},
    }
    for tier in cfg.tiers:
        records = builder.build(tier, cfg.n_pairs, cfg.dataset_seed)
        path = out / f"dataset_{tier}.jsonl"
        save_dataset(records, path, seed=cfg.dataset_seed, oracle_seed=cfg.oracle_seed,
                     config_hash=cfg.hash())
        manifest["tiers"][tier] = {"path": path.name, "sha": dataset_hash(path), "n": len(records)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _load_tier(cfg: ExperimentConfig, tier: str):
    path = Path(cfg.out_dir) / f"dataset_{tier}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset for tier {tier!r} not found at {path}; run generate first")
    records, meta = load_dataset(path)
    return records, meta, dataset_hash(path)


# -- single cell --------------------------------------------------------------


def run_cell(cfg: ExperimentConfig, method: str, tier: str, seed: int,
             artifacts_dir=None) -> CellResult:
    """Train one method on one tier with one seed and evaluate it.

    With ``artifacts_dir`` set, the fitted policy, the run report, and
    the per-step loss curve are written there as JSON/CSV.
    """
    records, meta, ds_hash = _load_tier(cfg, tier)
    train_records, eval_records = shuffle_and_split(records, cfg.split_seed, cfg.train_fraction)
    oracle = GroundTruthOracle.from_seed(meta.get("oracle_seed", cfg.oracle_seed))
    optimizer = OptimizerConfig(name=cfg.optimizer, learning_rate=cfg.learning_rate)

    if method in _MADPO_ABLATIONS:
        weight_cfg = cfg.weight_config()
        kind = LossKind(name=MADPO, beta=cfg.beta, weight_config=weight_cfg,
                        ablation=_MADPO_ABLATIONS[method])
        train_cfg = TrainConfig(loss=kind, epochs=cfg.epochs, batch_size=cfg.batch_size,
                                optimizer=optimizer, seed=seed)
        result: TwoStepResult = two_step_pipeline(train_records, eval_records, weight_cfg,
                                                  train_cfg, rm_params=cfg.rm_params())
        theta, report = result.policy_coef, result.run_report
    else:
        name = {METHOD_DPO: DPO, METHOD_IPO: IPO, METHOD_BETA_DPO: BETA_DPO}[method]
        kind = LossKind(name=name, beta=cfg.beta)
        beta_dpo = None
        if name == BETA_DPO:
            beta_dpo = BetaDpoConfig(m=cfg.bdpo_m, h0=cfg.bdpo_h0,
                                     keep_fraction=cfg.bdpo_keep_fraction,
                                     sigma_init=cfg.bdpo_sigma_init,
                                     momentum=cfg.bdpo_momentum,
                                     beta_floor=cfg.bdpo_beta_floor)
        train_cfg = TrainConfig(loss=kind, epochs=cfg.epochs, batch_size=cfg.batch_size,
                                optimizer=optimizer, seed=seed, beta_dpo=beta_dpo)
        theta, report = train_policy(train_records, train_cfg, dataset_hash=ds_hash)

    reference = ReferencePolicy()
    rewards = per_prompt_best_of_k_rewards(theta, reference,
                                           eval_prompts_from_records(eval_records), oracle,
                                           k_candidates=cfg.k_candidates, seed=seed)
    mean = float(rewards.mean())
    stderr = float(rewards.std(ddof=1) / np.sqrt(len(rewards)))
    report.mean_oracle_reward = mean
    report.dataset_hash = ds_hash

    if artifacts_dir is not None:
        out = Path(artifacts_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{method}_{tier}_seed{seed}"
        save_policy(theta, out / f"{stem}_policy.json",
                    ref_hash=reference.hash(), config_hash=cfg.hash())
        (out / f"{stem}_report.json").write_text(json.dumps(report.to_dict(), sort_keys=True))
        report.write_loss_csv(out / f"{stem}_loss.csv")

    return CellResult(method=method, tier=tier, seed=seed, mean_reward=mean,
                      std_error=stderr, report=report.to_dict())


def _run_cell_job(args) -> CellResult:
    cfg_dict, method, tier, seed, artifacts_dir = args
    return run_cell(ExperimentConfig(**cfg_dict), method, tier, seed, artifacts_dir=artifacts_dir)


def run_grid(cfg: ExperimentConfig, parallel: int = 1,
             write_artifacts: bool = False) -> list[CellResult]:
    """Run every (method, tier, seed) cell; failed cells are reported and
    skipped so the rest of the grid still completes."""
    jobs = [(method, tier, seed) for method in cfg.methods for tier in cfg.tiers for seed in cfg.seeds]
    artifacts = str(Path(cfg.out_dir) / "cells") if write_artifacts else None
    results: list[CellResult] = []
    failures: list[str] = []
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {pool.submit(_run_cell_job, (asdict(cfg), *job, artifacts)): job
                       for job in jobs}
            for future, job in futures.items():
                try:
                    results.append(future.result())
                except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                    failures.append(f"{job[0]}/{job[1]}/seed{job[2]}: {exc}")
        results.sort(key=lambda r: (cfg.methods.index(r.method), cfg.tiers.index(r.tier), r.seed))
    else:
        for method, tier, seed in jobs:
            try:
                results.append(run_cell(cfg, method, tier, seed, artifacts_dir=artifacts))
            except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                failures.append(f"{method}/{tier}/seed{seed}: {exc}")
    for failure in failures:
        print(f"cell failed: {failure}")
    return results


# -- tables -------------------------------------------------------------------


def aggregate(results: list[CellResult]) -> list[dict]:
    """Per (method, tier): mean over seeds and standard error of seed means."""
    groups: dict[tuple, list[float]] = {}
    for r in results:
        groups.setdefault((r.method, r.tier), []).append(r.mean_reward)
    rows = []
    for (method, tier), values in sorted(groups.items()):
        arr = np.asarray(values)
        stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        rows.append({"method": method, "tier": tier, "n_seeds": len(arr),
                     "mean_reward": float(arr.mean()), "std_error": stderr})
    return rows


def write_results(results: list[CellResult], out_dir, cfg: ExperimentConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "results.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "tier", "seed", "mean_reward", "std_error"])
        writer.writeheader()
        for r in results:
            writer.writerow({"method": r.method, "tier": r.tier, "seed": r.seed,
                             "mean_reward": repr(r.mean_reward), "std_error": repr(r.std_error)})
    payload = {
        "config_hash": cfg.hash(),
        "cells": [
            {"method": r.method, "tier": r.tier, "seed": r.seed,
             "mean_reward": r.mean_reward, "std_error": r.std_error, "report": r.report}
            for r in results
        ],
        "aggregate": aggregate(results),
    }
    (out / "results.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_results(out_dir) -> list[CellResult]:
    path = Path(out_dir) / "results.csv"
    rows = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            rows.append(CellResult(method=row["method"], tier=row["tier"], seed=int(row["seed"]),
                                   mean_reward=float(row["mean_reward"]),
                                   std_error=float(row["std_error"])))
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'method':<12} {'tier':<8} {'mean_reward':>12} {'std_error':>10} {'seeds':>6}"]
    for row in rows:
        lines.append(f"{row['method']:<12} {row['tier']:<8} "
                     f"{row['mean_reward']:>12.4f} {row['std_error']:>10.4f} {row['n_seeds']:>6}")
    return "\n".join(lines)


# -- sweeps -------------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig, parallel: int = 1) -> list[dict]:
    """Threshold and amplification sweeps for the adaptive method.

    Emits tidy rows (param, value, tier, seed, mean_reward); the
    amplification sweep sets the ceiling to the swept value and the floor
    to its reciprocal.
    """
    rows = []
    variants = [("tau", float(v), replace_threshold(cfg, v)) for v in cfg.tau_grid]
    variants += [("c", float(v), replace_intensity(cfg, v)) for v in cfg.c_grid]
    for param, value, sub_cfg in variants:
        sub_cfg = replace_field(sub_cfg, methods=(METHOD_MADPO,))
        for cell in run_grid(sub_cfg, parallel=parallel):
            rows.append({"param": param, "value": value, "tier": cell.tier,
                         "seed": cell.seed, "mean_reward": cell.mean_reward})
    return rows


def replace_field(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    data = asdict(cfg)
    data.update(kw)
    return ExperimentConfig(**data)


def replace_threshold(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    return replace_field(cfg, threshold=float(value))


def replace_intensity(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    return replace_field(cfg, c_max=float(value))


def write_sweep(rows: list[dict], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "tier", "seed", "mean_reward"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "mean_reward": repr(row["mean_reward"])})
    return path

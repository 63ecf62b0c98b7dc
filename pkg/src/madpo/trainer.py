"""Mini-batch policy training for all loss families.

Covers plain DPO and IPO, the batch-adaptive temperature variant with
score-guided filtering, and the adaptive two-step pipeline (reward-model
fit, then margin-weighted policy training). Runs are pure functions of
(records, config): shuffling, filtering, and evaluation all draw from
streams keyed by the config seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import rng
from .losses import (
    ABLATION_FULL,
    BETA_DPO,
    DPO,
    IPO,
    MADPO,
    LossKind,
    WeightConfig,
    sigmoid,
    softplus,
    weight_ablated,
)
from .optim import OptimizerConfig
from .reward_model import FitReport, RewardModel
from .world import margin_features


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class BetaDpoConfig:
    """Batch-level temperature adaptation and filtering settings.

    ``beta_floor`` is off by default: negative adapted temperatures are
    returned as-is and counted, which reproduces the instability the
    batch-adaptive rule is known for.
    """

    m: float = 0.6
    h0: float = 0.0
    keep_fraction: float = 0.8
    sigma_init: float = 1.0
    momentum: float = 0.9
    beta_floor: float | None = None
    adapt_before_filter: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.m <= 1.0):
            raise ValueError("m must lie in (0, 1]")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.sigma_init <= 0.0:
            raise ValueError("sigma_init must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind
    epochs: int = 2
    batch_size: int = 64
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    beta_dpo: BetaDpoConfig | None = None
    track_params: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss.name == BETA_DPO and self.beta_dpo is None:
            raise ValueError("the batch-adaptive loss requires a beta_dpo config")

    def hash(self) -> str:
        return config_hash(self)


@dataclass
class FilterState:
    """Running statistics of implicit margins used by the batch filter."""

    center: float = 0.0
    sigma: float = 1.0
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    effective_beta: float


@dataclass
class RunReport:
    """Diagnostics of one training run."""

    epoch_losses: list[float] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    effective_betas: list[float] = field(default_factory=list)
    negative_beta_incidents: int = 0
    filter_fallbacks: int = 0
    mean_oracle_reward: float | None = None
    config_hash: str = ""
    seed: int = 0
    dataset_hash: str | None = None
    param_trace: list[np.ndarray] | None = None

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "negative_beta_incidents": self.negative_beta_incidents,
            "filter_fallbacks": self.filter_fallbacks,
            "mean_oracle_reward": self.mean_oracle_reward,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
            "n_steps": len(self.steps),
        }

    def write_loss_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,step,loss,effective_beta\n")
            for s in self.steps:
                fh.write(f"{s.epoch},{s.step},{s.loss!r},{s.effective_beta!r}\n")


def config_hash(obj) -> str:
    """Stable short hash of any dataclass-ish config tree."""

    def encode(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return {k: encode(getattr(o, k)) for k in o.__dataclass_fields__}
        if isinstance(o, (list, tuple)):
            return [encode(v) for v in o]
        if isinstance(o, dict):
            return {k: encode(v) for k, v in o.items()}
        return o

    blob = json.dumps(encode(obj), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def beta_batch_adapt(base_beta: float, batch_margins, m: float, h0: float,
                     floor: float | None = None) -> tuple[float, bool]:
    """Batch-adapted temperature base_beta * (1 + m * (mean margin - h0)).

    Returns the temperature together with an incident flag: with no floor
    the flag marks a negative result (returned unclamped); with a floor it
    marks that clamping engaged.
    """
    margins = np.asarray(batch_margins, dtype=float)
    if margins.size == 0:
        raise ValueError("batch must be non-empty")
    if not (0.0 < m <= 1.0):
        raise ValueError("m must lie in (0, 1]")
    adapted = base_beta * (1.0 + m * (float(margins.mean()) - h0))
    if floor is None:
        return adapted, adapted < 0.0
    return max(adapted, floor), adapted < floor


def beta_guided_filter(batch_indices, batch_margins, state: FilterState,
                       keep_fraction: float, rand) -> tuple[np.ndarray, FilterState, bool]:
    """Weighted subsampling without replacement by a Normal pdf score.

    Each record scores the Normal(center, sigma^2) density at its margin,
    so records near the target margin are preferentially kept. Returns
    the kept indices, the state with its running sigma advanced by the
    batch's margin standard deviation, and a flag marking the all-zero
    score fallback to uniform sampling.
    """
    indices = np.asarray(batch_indices)
    margins = np.asarray(batch_margins, dtype=float)
    if indices.size == 0:
        raise ValueError("batch must be non-empty")
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must lie in (0, 1]")
    if isinstance(rand, (int, np.integer)):
        rand = rng.stream(rand)

    new_sigma = state.momentum * state.sigma + (1.0 - state.momentum) * float(margins.std())
    new_state = FilterState(center=state.center, sigma=max(new_sigma, 1e-8), momentum=state.momentum)

    if keep_fraction == 1.0:
        return indices.copy(), new_state, False

    z = (margins - state.center) / state.sigma
    scores = np.exp(-0.5 * z * z) / (state.sigma * math.sqrt(2.0 * math.pi))
    n_keep = int(math.ceil(keep_fraction * indices.size))
    total = scores.sum()
    fallback = not (total > 0.0 and np.isfinite(total))
    probs = None if fallback else scores / total
    chosen = rand.choice(indices.size, size=n_keep, replace=False, p=probs)
    return indices[chosen], new_state, fallback


def _grad_scalars(margins: np.ndarray, weights: np.ndarray | None,
                  kind: LossKind, beta: float) -> np.ndarray:
    if kind.name == IPO:
        return 2.0 * (margins - 0.5 / kind.beta)
    scal = -beta * sigmoid(-beta * margins)
    return scal if weights is None else weights * scal


def _loss_values(margins: np.ndarray, weights: np.ndarray | None,
                 kind: LossKind, beta: float) -> np.ndarray:
    if kind.name == IPO:
        return (margins - 0.5 / kind.beta) ** 2
    vals = softplus(-beta * margins)
    return vals if weights is None else weights * vals


def train_policy(records: list, cfg: TrainConfig,
                 reward_coef: np.ndarray | None = None,
                 weight_cfg: WeightConfig | None = None,
                 reward_margins: np.ndarray | None = None,
                 dataset_hash: str | None = None) -> tuple[np.ndarray, RunReport]:
    """Train the policy adjustment on preference records.

    For the adaptive loss the per-record reward margins are computed once
    (from ``reward_margins`` if given, else from ``reward_coef``) and the
    weights cached; they do not depend on the policy parameters. The
    batch-adaptive baseline filters each batch and then adapts the
    temperature on the surviving records (flip ``adapt_before_filter``
    for the other order).

    Returns the trained parameters and a :class:`RunReport`.
    """
    if not records:
        raise ValueError("records must be non-empty")
    kind = cfg.loss
    diffs = margin_features(records)
    n = len(records)

    weights = None
    if kind.name == MADPO:
        wc = weight_cfg or kind.weight_config
        if wc is None:
            raise ValueError("the adaptive loss requires a weight config")
        if reward_margins is None:
            if reward_coef is None:
                raise ValueError("the adaptive loss requires reward margins or reward params")
            reward_margins = diffs @ np.asarray(reward_coef, dtype=float)
        reward_margins = np.asarray(reward_margins, dtype=float)
        if reward_margins.shape != (n,):
            raise ValueError(f"expected {n} reward margins, got {reward_margins.shape}")
        weights = weight_ablated(reward_margins, wc, kind.ablation)

    report = RunReport(config_hash=cfg.hash(), seed=cfg.seed, dataset_hash=dataset_hash,
                       param_trace=[] if cfg.track_params else None)
    theta = np.zeros(diffs.shape[1])
    optimizer = cfg.optimizer.build()
    shuffler = rng.stream(cfg.seed, 0)
    filter_rand = rng.stream(cfg.seed, 1)
    filter_state = None
    if cfg.beta_dpo is not None:
        filter_state = FilterState(center=cfg.beta_dpo.h0, sigma=cfg.beta_dpo.sigma_init,
                                   momentum=cfg.beta_dpo.momentum)

    for epoch in range(cfg.epochs):
        order = shuffler.permutation(n)
        step_losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            margins = diffs[idx] @ theta
            beta_eff = kind.beta

            if kind.name == BETA_DPO:
                bd = cfg.beta_dpo
                if bd.adapt_before_filter:
                    beta_eff, incident = beta_batch_adapt(kind.beta, margins, bd.m, bd.h0, bd.beta_floor)
                    report.negative_beta_incidents += int(incident)
                if bd.keep_fraction < 1.0:
                    kept, filter_state, fellback = beta_guided_filter(
                        idx, margins, filter_state, bd.keep_fraction, filter_rand)
                    report.filter_fallbacks += int(fellback)
                    idx = kept
                    margins = diffs[idx] @ theta
                else:
                    _, filter_state, _ = beta_guided_filter(idx, margins, filter_state, 1.0, filter_rand)
                if not bd.adapt_before_filter:
                    beta_eff, incident = beta_batch_adapt(kind.beta, margins, bd.m, bd.h0, bd.beta_floor)
                    report.negative_beta_incidents += int(incident)

            w_batch = None if weights is None else weights[idx]
            # overflow deliberately surfaces as a non-finite loss below
            with np.errstate(over="ignore"):
                batch_loss = float(np.mean(_loss_values(margins, w_batch, kind, beta_eff)))
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} (beta={beta_eff})")
            scalars = _grad_scalars(margins, w_batch, kind, beta_eff)
            grad = diffs[idx].T @ scalars / len(idx)
            theta = optimizer.step(theta, grad)

            step_losses.append(batch_loss)
            report.steps.append(StepRecord(epoch=epoch, step=step, loss=batch_loss,
                                           effective_beta=beta_eff))
            report.effective_betas.append(beta_eff)
            if cfg.track_params:
                report.param_trace.append(theta.copy())
        report.epoch_losses.append(float(np.mean(step_losses)) if step_losses else float("nan"))

    return theta, report


class PolicyTrainer(BaseEstimator):
    """Estimator facade over :func:`train_policy`.

    Hyperparameters are flat scalars so the trainer composes with
    standard tooling (``get_params``/``set_params``/``clone``). For the
    adaptive loss, pass the per-record reward margins to :meth:`fit`.
    """

    def __init__(self, loss: str = DPO, beta: float = 0.1, ablation: str = ABLATION_FULL,
                 c_min: float = 0.5, c_max: float = 2.0, sharpness: float = 1.0,
                 threshold: float = 4.0, epochs: int = 2, batch_size: int = 64,
                 optimizer: str = "adam", learning_rate: float = 1e-2, seed: int = 0,
                 bdpo_m: float = 0.6, bdpo_h0: float = 0.0, bdpo_keep_fraction: float = 0.8,
                 bdpo_sigma_init: float = 1.0, bdpo_momentum: float = 0.9,
                 bdpo_beta_floor: float | None = None, bdpo_adapt_before_filter: bool = False,
                 track_params: bool = False):
        self.loss = loss
        self.beta = beta
        self.ablation = ablation
        self.c_min = c_min
        self.c_max = c_max
        self.sharpness = sharpness
        self.threshold = threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.seed = seed
        self.bdpo_m = bdpo_m
        self.bdpo_h0 = bdpo_h0
        self.bdpo_keep_fraction = bdpo_keep_fraction
        self.bdpo_sigma_init = bdpo_sigma_init
        self.bdpo_momentum = bdpo_momentum
        self.bdpo_beta_floor = bdpo_beta_floor
        self.bdpo_adapt_before_filter = bdpo_adapt_before_filter
        self.track_params = track_params

    def to_train_config(self) -> TrainConfig:
        weight_cfg = None
        if self.loss == MADPO:
            weight_cfg = WeightConfig(c_min=self.c_min, c_max=self.c_max,
                                      sharpness=self.sharpness, threshold=self.threshold)
        kind = LossKind(name=self.loss, beta=self.beta, weight_config=weight_cfg,
                        ablation=self.ablation if self.loss == MADPO else ABLATION_FULL)
        beta_dpo = None
        if self.loss == BETA_DPO:
            beta_dpo = BetaDpoConfig(m=self.bdpo_m, h0=self.bdpo_h0,
                                     keep_fraction=self.bdpo_keep_fraction,
                                     sigma_init=self.bdpo_sigma_init,
                                     momentum=self.bdpo_momentum,
                                     beta_floor=self.bdpo_beta_floor,
                                     adapt_before_filter=self.bdpo_adapt_before_filter)
        return TrainConfig(loss=kind, epochs=self.epochs, batch_size=self.batch_size,
                           optimizer=OptimizerConfig(name=self.optimizer,
                                                     learning_rate=self.learning_rate),
                           seed=self.seed, beta_dpo=beta_dpo, track_params=self.track_params)

    def fit(self, records: list, reward_margins: np.ndarray | None = None) -> "PolicyTrainer":
        cfg = self.to_train_config()
        self.coef_, self.report_ = train_policy(records, cfg, reward_margins=reward_margins)
        return self

    def margins(self, records: list) -> np.ndarray:
        if not hasattr(self, "coef_"):
            raise NotFittedError("this PolicyTrainer has not been fitted yet")
        return margin_features(records) @ self.coef_


@dataclass
class TwoStepResult:
    reward_report: FitReport
    policy_coef: np.ndarray
    run_report: RunReport


def two_step_pipeline(train_records: list, val_records: list, weight_cfg: WeightConfig,
                      train_cfg: TrainConfig, rm_params: dict | None = None) -> TwoStepResult:
    """Fit the reward model, freeze it, then train the weighted policy.

    Step 1 fits the explicit reward model on the training records with
    early stopping against the validation records. Step 2 treats the
    fitted margins as fixed inputs of the adaptive weight and trains the
    policy on the training records.
    """
    if train_cfg.loss.name != MADPO:
        raise ValueError("the two-step pipeline trains the adaptive loss")
    reward_model = RewardModel(**(rm_params or {})).fit(train_records, val_records)
    reward_margins = reward_model.margin(train_records)
    kind = replace(train_cfg.loss, weight_config=weight_cfg)
    cfg = replace(train_cfg, loss=kind)
    theta, report = train_policy(train_records, cfg, reward_margins=reward_margins)
    return TwoStepResult(reward_report=reward_model.report_, policy_coef=theta, run_report=report)

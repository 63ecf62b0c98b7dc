"""Margin-adaptive preference optimization lab.

A desk-scale environment for studying adaptive re-weighting of pairwise
preference losses: synthetic preference data in three quality tiers, an
explicit reward model, log-linear policy training under four loss
families, and a numerical verification suite for the underlying theory.
"""

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
    coefficient,
    log_sigmoid,
    per_pair_grad,
    per_pair_hessian,
    per_pair_loss,
    sigmoid,
    softplus,
    weight,
    weight_ablated,
    weight_supremum,
)
from .optim import OptimizerConfig
from .policy import ReferencePolicy, implicit_margin, margin_grad, mean_oracle_reward
from .reward_model import FitReport, RewardModel, explicit_margin, fit_reward_model, rm_loss
from .trainer import (
    BetaDpoConfig,
    FilterState,
    PolicyTrainer,
    RunReport,
    TrainConfig,
    beta_batch_adapt,
    beta_guided_filter,
    train_policy,
    two_step_pipeline,
)
from .world import (
    DatasetBuilder,
    GroundTruthOracle,
    PreferenceRecord,
    Prompt,
    Response,
    build_dataset,
    sample_preference,
    shuffle_and_split,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_AMP_ONLY", "ABLATION_FULL", "ABLATION_REG_ONLY",
    "BETA_DPO", "DPO", "IPO", "MADPO",
    "LossKind", "WeightConfig", "OptimizerConfig",
    "coefficient", "log_sigmoid", "sigmoid", "softplus",
    "per_pair_loss", "per_pair_grad", "per_pair_hessian",
    "weight", "weight_ablated", "weight_supremum",
    "ReferencePolicy", "implicit_margin", "margin_grad", "mean_oracle_reward",
    "FitReport", "RewardModel", "explicit_margin", "fit_reward_model", "rm_loss",
    "BetaDpoConfig", "FilterState", "PolicyTrainer", "RunReport", "TrainConfig",
    "beta_batch_adapt", "beta_guided_filter", "train_policy", "two_step_pipeline",
    "DatasetBuilder", "GroundTruthOracle", "PreferenceRecord", "Prompt", "Response",
    "build_dataset", "sample_preference", "shuffle_and_split",
    "__version__",
]

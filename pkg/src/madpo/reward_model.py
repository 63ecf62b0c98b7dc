"""Explicit reward model: logistic fit of pairwise margins with early stopping.

The model scores a (prompt, response) pair linearly in the joint feature
map, so a preference pair contributes through the feature difference
psi(x, y_w) - psi(x, y_l) only. Fitting minimises the mean negative
log-likelihood of the observed winners under the logistic link, which is
convex, by full-batch gradient descent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .losses import sigmoid, softplus
from .world import FEATURE_DIM, PreferenceRecord, joint_features, margin_features


class FitDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class FitReport:
    train_curve: list[float]
    val_curve: list[float]
    stopped_epoch: int
    final_params: np.ndarray = field(repr=False)

    @property
    def best_val_loss(self) -> float:
        return self.val_curve[self.stopped_epoch]


def explicit_margin(coef: np.ndarray, record: PreferenceRecord) -> float:
    """Reward-model margin of one pair: score(winner) - score(loser)."""
    coef = np.asarray(coef, dtype=float)
    x = record.prompt.features
    diff = joint_features(x, record.winner.features) - joint_features(x, record.loser.features)
    if diff.shape[-1] != coef.shape[0]:
        raise ValueError(f"feature dim {diff.shape[-1]} does not match params dim {coef.shape[0]}")
    return float(diff @ coef)


def rm_loss(coef: np.ndarray, records: list) -> float:
    """Mean negative log-likelihood of the observed winners."""
    if not records:
        raise ValueError("batch must be non-empty")
    margins = margin_features(records) @ np.asarray(coef, dtype=float)
    return float(np.mean(softplus(-margins)))


def rm_loss_grad(coef: np.ndarray, records: list) -> np.ndarray:
    """Analytic gradient of :func:`rm_loss` with respect to the parameters."""
    if not records:
        raise ValueError("batch must be non-empty")
    diffs = margin_features(records)
    margins = diffs @ np.asarray(coef, dtype=float)
    return -(diffs.T @ sigmoid(-margins)) / len(records)


class RewardModel(BaseEstimator):
    """Linear Bradley-Terry reward model with patience-based early stopping.

    Parameters
    ----------
    learning_rate : fixed gradient-descent step (the objective is convex).
    max_epochs : full-batch epochs to attempt; 0 returns the initial params.
    patience : stop after this many epochs without a new best validation loss.
    center : if True, project the params to zero mean after each step
        (identifiability normalisation; off by default).
    init_scale : standard deviation of the random init; 0 starts at zero.
    seed : seed for the random init when ``init_scale > 0``.
    """

    def __init__(self, learning_rate: float = 0.1, max_epochs: int = 300,
                 patience: int = 5, center: bool = False,
                 init_scale: float = 0.0, seed: int = 0):
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.center = center
        self.init_scale = init_scale
        self.seed = seed

    def fit(self, records: list, val_records: list) -> "RewardModel":
        if not records or not val_records:
            raise ValueError("both train and validation records are required")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")

        train_diffs = margin_features(records)
        val_diffs = margin_features(val_records)
        coef = np.zeros(train_diffs.shape[1])
        if self.init_scale > 0:
            coef = self.init_scale * np.random.default_rng(self.seed).standard_normal(coef.shape)
        if self.center:
            coef = coef - coef.mean()

        def losses(c):
            # overflow deliberately surfaces as a non-finite loss, which
            # the epoch loop reports as a diverged fit
            with np.errstate(over="ignore"):
                return (float(np.mean(softplus(-(train_diffs @ c)))),
                        float(np.mean(softplus(-(val_diffs @ c)))))

        train_curve, val_curve = [], []
        tl, vl = losses(coef)
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise FitDivergedError("loss non-finite at initialization")
        train_curve.append(tl)
        val_curve.append(vl)
        best = (vl, coef.copy(), 0)
        since_best = 0

        for epoch in range(1, self.max_epochs + 1):
            margins = train_diffs @ coef
            grad = -(train_diffs.T @ sigmoid(-margins)) / len(records)
            coef = coef - self.learning_rate * grad
            if self.center:
                coef = coef - coef.mean()
            tl, vl = losses(coef)
            if not (np.isfinite(tl) and np.isfinite(vl)):
                raise FitDivergedError(f"loss became non-finite at epoch {epoch}")
            train_curve.append(tl)
            val_curve.append(vl)
            if vl < best[0]:
                best = (vl, coef.copy(), epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= self.patience:
                    break

        self.coef_ = best[1]
        self.stopped_epoch_ = best[2]
        self.report_ = FitReport(train_curve=train_curve, val_curve=val_curve,
                                 stopped_epoch=best[2], final_params=best[1])
        return self

    def margin(self, records: list) -> np.ndarray:
        """Fitted margins for a list of records."""
        self._require_fitted()
        return margin_features(records) @ self.coef_

    def predict_win_probability(self, records: list) -> np.ndarray:
        """Probability that the recorded winner beats the recorded loser."""
        return sigmoid(self.margin(records))

    def save(self, path, config_hash: str = "") -> None:
        self._require_fitted()
        payload = {
            "phi": self.coef_.tolist(),
            "config_hash": config_hash,
            "stopped_epoch": self.stopped_epoch_,
            "val_loss": self.report_.best_val_loss,
        }
        Path(path).write_text(json.dumps(payload))

    @staticmethod
    def load_params(path) -> np.ndarray:
        payload = json.loads(Path(path).read_text())
        coef = np.asarray(payload["phi"], dtype=float)
        if coef.shape != (FEATURE_DIM,):
            raise ValueError(f"expected {FEATURE_DIM} params, got {coef.shape}")
        return coef

    def _require_fitted(self) -> None:
        if not hasattr(self, "coef_"):
            raise NotFittedError("this RewardModel has not been fitted yet")


def fit_reward_model(records: list, val_records: list, **params) -> FitReport:
    """Functional wrapper around :class:`RewardModel`."""
    return RewardModel(**params).fit(records, val_records).report_

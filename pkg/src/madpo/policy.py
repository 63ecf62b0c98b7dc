"""Log-linear policy adjustment over a frozen reference policy.

The trainable policy tilts the reference by exp(theta . psi(x, y)); in
the winner-minus-loser difference of log probability ratios the
partition function cancels, so the policy margin reduces to
theta . (psi(x, y_w) - psi(x, y_l)) with no normalisation needed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .world import (
    FEATURE_DIM,
    GroundTruthOracle,
    PreferenceRecord,
    Prompt,
    eval_candidates,
    joint_features,
    margin_features,
)


@dataclass
class ReferencePolicy:
    """Frozen base policy: a linear score over the joint features.

    Candidate responses at evaluation time come from the world's
    generated-response sampler, which plays the role of drawing from the
    reference. Scores are finite, so every candidate keeps nonzero
    probability under the softmax.
    """

    base_coef: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))

    def log_probs(self, prompt_features: np.ndarray, candidates: np.ndarray,
                  tilt: np.ndarray | None = None) -> np.ndarray:
        """Normalised log probabilities over a finite candidate set."""
        coef = self.base_coef if tilt is None else self.base_coef + tilt
        scores = joint_features(prompt_features, candidates) @ coef
        return scores - _logsumexp(scores)

    def hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.base_coef).tobytes()).hexdigest()[:16]


def _logsumexp(scores: np.ndarray) -> float:
    m = np.max(scores)
    return float(m + np.log(np.sum(np.exp(scores - m))))


def implicit_margin(theta: np.ndarray, record: PreferenceRecord) -> float:
    """Policy margin of one pair: theta . (psi(x, y_w) - psi(x, y_l))."""
    theta = np.asarray(theta, dtype=float)
    diff = margin_grad(theta, record)
    return float(diff @ theta)


def implicit_margins(theta: np.ndarray, records: list) -> np.ndarray:
    return margin_features(records) @ np.asarray(theta, dtype=float)


def margin_grad(theta: np.ndarray, record: PreferenceRecord) -> np.ndarray:
    """Gradient of the policy margin in theta: the pair's feature difference.

    Constant in theta for the log-linear family.
    """
    theta = np.asarray(theta, dtype=float)
    x = record.prompt.features
    diff = joint_features(x, record.winner.features) - joint_features(x, record.loser.features)
    if diff.shape[-1] != theta.shape[0]:
        raise ValueError(f"feature dim {diff.shape[-1]} does not match theta dim {theta.shape[0]}")
    return diff


def implicit_margin_normalized(theta: np.ndarray, ref: ReferencePolicy,
                               record: PreferenceRecord,
                               extra_candidates: np.ndarray) -> float:
    """Policy margin computed the long way, with explicit normalisation.

    Builds a candidate set containing the pair's two responses, computes
    fully normalised log probabilities for the tilted and the reference
    policy, and differences the log ratios. Equals
    :func:`implicit_margin` up to floating-point error because the
    partition terms cancel; exists so that cancellation is testable.
    """
    theta = np.asarray(theta, dtype=float)
    cands = np.vstack([record.winner.features, record.loser.features, extra_candidates])
    x = record.prompt.features
    lp_pol = ref.log_probs(x, cands, tilt=theta)
    lp_ref = ref.log_probs(x, cands)
    ratio = lp_pol - lp_ref
    return float(ratio[0] - ratio[1])


def per_prompt_best_of_k_rewards(theta: np.ndarray, ref: ReferencePolicy,
                                 eval_prompts: list, oracle: GroundTruthOracle,
                                 k_candidates: int = 8, seed: int = 0) -> np.ndarray:
    """Oracle reward of the selected candidate for each evaluation prompt.

    For every prompt, ``k_candidates`` responses are drawn from the
    generated-response sampler on a stream keyed by (seed, prompt id) and
    the candidate with the largest policy log-probability adjustment
    theta . psi(x, y) is kept (first index wins ties, so theta = 0
    reproduces a plain reference sample).
    """
    if k_candidates < 1:
        raise ValueError("k_candidates must be >= 1")
    if not eval_prompts:
        raise ValueError("eval_prompts must be non-empty")
    theta = np.asarray(theta, dtype=float)
    rewards = np.empty(len(eval_prompts))
    for j, prompt in enumerate(eval_prompts):
        cands = eval_candidates(oracle, k_candidates, seed, prompt.id)
        adjustment = joint_features(prompt.features, cands) @ theta
        pick = int(np.argmax(adjustment))
        rewards[j] = oracle.reward(prompt.features, cands[pick])
    return rewards


def mean_oracle_reward(theta: np.ndarray, ref: ReferencePolicy, eval_prompts: list,
                       oracle: GroundTruthOracle, k_candidates: int = 8,
                       seed: int = 0) -> float:
    """Mean ground-truth reward of best-of-k selections on held-out prompts.

    With k = 1 there is no selection pressure and the result is the
    reference sampler's own mean reward.
    """
    return float(np.mean(per_prompt_best_of_k_rewards(
        theta, ref, eval_prompts, oracle, k_candidates=k_candidates, seed=seed)))


def eval_prompts_from_records(records: list) -> list[Prompt]:
    return [rec.prompt for rec in records]


def save_policy(theta: np.ndarray, path, ref_hash: str = "", config_hash: str = "") -> None:
    payload = {"theta": np.asarray(theta, dtype=float).tolist(),
               "ref_hash": ref_hash, "config_hash": config_hash}
    Path(path).write_text(json.dumps(payload))


def load_policy(path) -> tuple[np.ndarray, dict]:
    payload = json.loads(Path(path).read_text())
    theta = np.asarray(payload["theta"], dtype=float)
    if theta.shape != (FEATURE_DIM,):
        raise ValueError(f"expected {FEATURE_DIM} policy params, got {theta.shape}")
    return theta, {k: payload[k] for k in ("ref_hash", "config_hash")}

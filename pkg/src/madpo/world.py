"""Synthetic preference world: prompts, responses, a bounded reward
oracle, noisy pairwise choices, and the three dataset quality tiers.

Responses live in an 8-dimensional feature space; a pair scores through
the joint feature map psi(x, y) = concat(x, y, x*y) under a fixed, seeded
linear score that a bounded sigmoid maps into the reward range [-3, 3].
Every random quantity is drawn from a counter-based stream keyed by
(seed, lane, index), so datasets are pure functions of their arguments
and records can be regenerated independently of iteration order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .losses import sigmoid

PROMPT_DIM = 8
RESPONSE_DIM = 8
FEATURE_DIM = PROMPT_DIM + 2 * RESPONSE_DIM

TIER_HIGH = "high"
TIER_MEDIUM = "medium"
TIER_LOW = "low"
TIERS = (TIER_HIGH, TIER_MEDIUM, TIER_LOW)

SOURCE_GENERATED = "generated"
SOURCE_NEGATIVE = "negative_corpus"

REWARD_BOUND = 3.0

# sampler calibration: generated responses concentrate in the upper
# reward range, negative-corpus responses in the lower range with a wide
# quality spread; verified by the tier-ordering tests
ORACLE_SCALE = 3.0
GENERATED_SHIFT = 0.8
NEGATIVE_SHIFT_RANGE = (-4.5, 0.5)
HIGH_SCORE_MIN_REWARD = 1.0
MAX_REJECTION_ROUNDS = 64

# stream lanes
_LANE_ORACLE = 0
_LANE_PROMPT = 1
_LANE_RESPONSE_A = 2
_LANE_RESPONSE_B = 3
_LANE_CHOICE = 4
_LANE_NEG_SHIFT = 5
_LANE_EVAL = 6


@dataclass
class Prompt:
    id: int
    features: np.ndarray


@dataclass
class Response:
    features: np.ndarray
    source: str


@dataclass
class PreferenceRecord:
    """One (prompt, winner, loser) pair with oracle rewards and provenance.

    Winner/loser reflect the noisy choice draw, so ``oracle_reward_w`` may
    be smaller than ``oracle_reward_l``; that label noise is intentional.
    """

    prompt: Prompt
    winner: Response
    loser: Response
    oracle_reward_w: float
    oracle_reward_l: float
    tier: str


def joint_features(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """psi(x, y) = concat(x, y, x*y); broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    return np.concatenate([x, y, x * y], axis=-1)


@dataclass
class GroundTruthOracle:
    """Fixed scoring rule mapping (prompt, response) to a reward in [-3, 3]."""

    coef: np.ndarray
    scale: float = ORACLE_SCALE

    @classmethod
    def from_seed(cls, seed: int, scale: float = ORACLE_SCALE) -> "GroundTruthOracle":
        coef = rng.stream(seed, _LANE_ORACLE).standard_normal(FEATURE_DIM) / np.sqrt(FEATURE_DIM)
        return cls(coef=coef, scale=scale)

    def score(self, x: np.ndarray, y: np.ndarray):
        feats = joint_features(x, y)
        if feats.shape[-1] != self.coef.shape[0]:
            raise ValueError(f"feature dim {feats.shape[-1]} does not match oracle dim {self.coef.shape[0]}")
        return self.scale * (feats @ self.coef)

    def reward(self, x: np.ndarray, y: np.ndarray):
        """2*REWARD_BOUND*(sigmoid(score) - 1/2), bounded in (-3, 3)."""
        return 2.0 * REWARD_BOUND * (sigmoid(self.score(x, y)) - 0.5)

    def response_direction(self) -> np.ndarray:
        """Unit vector in response space along which the score grows fastest."""
        block = self.coef[PROMPT_DIM : PROMPT_DIM + RESPONSE_DIM]
        return block / np.linalg.norm(block)


def oracle_reward(oracle: GroundTruthOracle, prompt: Prompt, response: Response) -> float:
    return float(oracle.reward(prompt.features, response.features))


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def choice_noise(n: int, seed: int, start_index: int = 0) -> np.ndarray:
    """Gumbel noise pairs for records start_index..start_index+n-1.

    Pair ``i`` always reads positions (2i, 2i+1) of the choice stream, so
    batch generation and one-record-at-a-time generation agree exactly.
    """
    block = rng.uniform_block(2 * (start_index + n), seed, _LANE_CHOICE)
    return gumbel_from_uniform(block[2 * start_index :].reshape(n, 2))


def sample_preference(reward_first: float, reward_second: float, seed: int, index: int = 0) -> int:
    """Noisy winner of a two-response comparison: returns 1 or 2.

    Adds an independent standard Gumbel draw to each reward and picks the
    argmax, so the marginal win probability of the first response is
    sigmoid(reward_first - reward_second).
    """
    if not (np.isfinite(reward_first) and np.isfinite(reward_second)):
        raise ValueError("rewards must be finite")
    g = choice_noise(1, seed, start_index=index)[0]
    return 1 if reward_first + g[0] >= reward_second + g[1] else 2


def simulate_win_rate(reward_gap: float, n_draws: int, seed: int) -> float:
    """Empirical win frequency of the higher-reward side over n_draws pairs.

    Uses the same choice stream as :func:`sample_preference`, vectorised.
    """
    g = choice_noise(n_draws, seed)
    return float(np.mean(reward_gap + g[:, 0] >= g[:, 1]))


class DatasetBuilder:
    """Builds quality-tier datasets against a fixed oracle.

    The prompt stream depends only on (seed, index), never on the tier,
    so different tiers built from one seed compare the identical prompts.
    """

    def __init__(self, oracle: GroundTruthOracle):
        self.oracle = oracle
        self._direction = oracle.response_direction()

    # -- samplers ---------------------------------------------------------

    def prompts(self, n: int, seed: int) -> np.ndarray:
        return rng.stream(seed, _LANE_PROMPT, 0).standard_normal((n, PROMPT_DIM))

    def generated(self, n: int, seed: int, lane: int, round_: int = 0) -> np.ndarray:
        base = rng.stream(seed, lane, round_).standard_normal((n, RESPONSE_DIM))
        return GENERATED_SHIFT * self._direction + base

    def negative_corpus(self, n: int, seed: int) -> np.ndarray:
        lo, hi = NEGATIVE_SHIFT_RANGE
        shifts = rng.stream(seed, _LANE_NEG_SHIFT, 0).uniform(lo, hi, n)
        base = rng.stream(seed, _LANE_RESPONSE_B, 0).standard_normal((n, RESPONSE_DIM))
        return shifts[:, None] * self._direction + base

    def high_scoring_generated(self, prompts: np.ndarray, seed: int) -> np.ndarray:
        """Generated responses re-sampled until the oracle reward reaches
        HIGH_SCORE_MIN_REWARD (best draw wins if a record never qualifies).

        Round r of record i is row i of the (seed, lane, r) block, so the
        result is independent of how many other records needed re-draws.
        """
        n = len(prompts)
        chosen = self.generated(n, seed, _LANE_RESPONSE_A, 0)
        r = self.oracle.reward(prompts, chosen)
        done = r >= HIGH_SCORE_MIN_REWARD
        best, best_r = chosen.copy(), r.copy()
        for round_ in range(1, MAX_REJECTION_ROUNDS):
            if done.all():
                break
            candidate = self.generated(n, seed, _LANE_RESPONSE_A, round_)
            r = self.oracle.reward(prompts, candidate)
            accept = ~done & (r >= HIGH_SCORE_MIN_REWARD)
            chosen[accept] = candidate[accept]
            done |= accept
            improve = ~done & (r > best_r)
            best[improve] = candidate[improve]
            best_r[improve] = r[improve]
        chosen[~done] = best[~done]
        return chosen

    # -- tiers ------------------------------------------------------------

    def _pair_features(self, tier: str, prompts: np.ndarray, seed: int):
        n = len(prompts)
        if tier == TIER_HIGH:
            first = self.generated(n, seed, _LANE_RESPONSE_A, 0)
            second = self.generated(n, seed, _LANE_RESPONSE_B, 0)
            sources = (SOURCE_GENERATED, SOURCE_GENERATED)
        elif tier == TIER_LOW:
            first = self.high_scoring_generated(prompts, seed)
            second = self.negative_corpus(n, seed)
            sources = (SOURCE_GENERATED, SOURCE_NEGATIVE)
        else:
            raise ValueError(f"unknown tier {tier!r}")
        return first, second, sources

    def build(self, tier: str, n_pairs: int, seed: int) -> list[PreferenceRecord]:
        """Dataset of ``n_pairs`` records for one quality tier.

        The medium tier takes its first half from the low-tier pair
        construction and its second half from the high-tier one.
        """
        if tier not in TIERS:
            raise ValueError(f"unknown tier {tier!r}, expected one of {TIERS}")
        if n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        prompts = self.prompts(n_pairs, seed)

        if tier == TIER_MEDIUM:
            low_first, low_second, low_src = self._pair_features(TIER_LOW, prompts, seed)
            high_first, high_second, high_src = self._pair_features(TIER_HIGH, prompts, seed)
            half = n_pairs // 2
            first = np.concatenate([low_first[:half], high_first[half:]])
            second = np.concatenate([low_second[:half], high_second[half:]])
            src_first = [low_src[0]] * half + [high_src[0]] * (n_pairs - half)
            src_second = [low_src[1]] * half + [high_src[1]] * (n_pairs - half)
        else:
            first, second, (sf, ss) = self._pair_features(tier, prompts, seed)
            src_first = [sf] * n_pairs
            src_second = [ss] * n_pairs

        r_first = self.oracle.reward(prompts, first)
        r_second = self.oracle.reward(prompts, second)
        noise = choice_noise(n_pairs, seed)
        first_wins = r_first + noise[:, 0] >= r_second + noise[:, 1]

        records = []
        for i in range(n_pairs):
            win = bool(first_wins[i])
            w_feat, l_feat = (first[i], second[i]) if win else (second[i], first[i])
            w_src, l_src = (src_first[i], src_second[i]) if win else (src_second[i], src_first[i])
            r_w, r_l = (r_first[i], r_second[i]) if win else (r_second[i], r_first[i])
            records.append(
                PreferenceRecord(
                    prompt=Prompt(id=i, features=prompts[i]),
                    winner=Response(features=w_feat, source=w_src),
                    loser=Response(features=l_feat, source=l_src),
                    oracle_reward_w=float(r_w),
                    oracle_reward_l=float(r_l),
                    tier=tier,
                )
            )
        return records


def build_dataset(tier: str, n_pairs: int, seed: int, oracle: GroundTruthOracle) -> list[PreferenceRecord]:
    return DatasetBuilder(oracle).build(tier, n_pairs, seed)


def eval_candidates(oracle: GroundTruthOracle, k: int, seed: int, prompt_id: int) -> np.ndarray:
    """k generated-sampler responses for one evaluation prompt."""
    base = rng.stream(seed, _LANE_EVAL, prompt_id).standard_normal((k, RESPONSE_DIM))
    return GENERATED_SHIFT * oracle.response_direction() + base


def shuffle_and_split(records: list, seed: int, train_fraction: float):
    """One seeded permutation, then a split by count.

    The permutation depends only on (seed, len(records)), so tiers of
    equal size shuffled with the same seed keep identical prompt order.
    """
    if not records:
        raise ValueError("cannot split an empty dataset")
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must be in (0, 1)")
    perm = rng.stream(seed, 0).permutation(len(records))
    n_train = int(round(len(records) * train_fraction))
    shuffled = [records[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train:]


def margin_features(records: list) -> np.ndarray:
    """(n, FEATURE_DIM) matrix of psi(x, winner) - psi(x, loser)."""
    rows = np.empty((len(records), FEATURE_DIM))
    for i, rec in enumerate(records):
        x = rec.prompt.features
        rows[i] = joint_features(x, rec.winner.features) - joint_features(x, rec.loser.features)
    return rows


# -- persistence -----------------------------------------------------------


def save_dataset(records: list, path, seed: int, oracle_seed: int, config_hash: str = "") -> None:
    """Line-delimited JSON, one record per line, after a '#' header line
    carrying the seeds and config hash."""
    path = Path(path)
    header = {"seed": seed, "oracle_seed": oracle_seed, "n": len(records), "config_hash": config_hash}
    with path.open("w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(_record_to_dict(rec)) + "\n")


def load_dataset(path) -> tuple[list[PreferenceRecord], dict]:
    path = Path(path)
    records = []
    meta: dict = {}
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta = json.loads(line[1:])
                continue
            records.append(_record_from_dict(json.loads(line)))
    return records, meta


def dataset_hash(path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return digest[:16]


def _record_to_dict(rec: PreferenceRecord) -> dict:
    return {
        "id": rec.prompt.id,
        "tier": rec.tier,
        "x": rec.prompt.features.tolist(),
        "yw": rec.winner.features.tolist(),
        "yl": rec.loser.features.tolist(),
        "rw": rec.oracle_reward_w,
        "rl": rec.oracle_reward_l,
        "src_w": rec.winner.source,
        "src_l": rec.loser.source,
    }


def _record_from_dict(d: dict) -> PreferenceRecord:
    return PreferenceRecord(
        prompt=Prompt(id=int(d["id"]), features=np.asarray(d["x"], dtype=float)),
        winner=Response(features=np.asarray(d["yw"], dtype=float), source=d["src_w"]),
        loser=Response(features=np.asarray(d["yl"], dtype=float), source=d["src_l"]),
        oracle_reward_w=float(d["rw"]),
        oracle_reward_l=float(d["rl"]),
        tier=d["tier"],
    )

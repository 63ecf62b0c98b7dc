"""Pairwise preference losses and their margin derivatives.

Conventions used throughout:

* ``policy_margin`` is the difference of log policy-to-reference
  probability ratios between the winning and losing response (the
  quantity the preference losses act on).
* ``reward_margin`` is the score difference assigned to the pair by an
  explicit reward model; it drives the adaptive weight.

All functions accept scalars or numpy arrays and broadcast elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DPO = "dpo"
IPO = "ipo"
MADPO = "madpo"
BETA_DPO = "beta_dpo"
LOSS_NAMES = (DPO, IPO, MADPO, BETA_DPO)

ABLATION_FULL = "full"
ABLATION_AMP_ONLY = "amp_only"
ABLATION_REG_ONLY = "reg_only"
ABLATIONS = (ABLATION_FULL, ABLATION_AMP_ONLY, ABLATION_REG_ONLY)

# weight supremum is estimated on [-threshold, _W_SUP_GRID_HI] with this step
_W_SUP_GRID_HI = 200.0
_W_SUP_GRID_STEP = 1e-3


@dataclass(frozen=True)
class WeightConfig:
    """Hyperparameters of the margin-adaptive weight.

    ``c_min``/``c_max`` bound the coefficient (dampening floor and
    amplification ceiling), ``sharpness`` controls how fast the
    coefficient transitions, and ``threshold`` separates low-margin from
    high-margin pairs.
    """

    c_min: float
    c_max: float
    sharpness: float = 1.0
    threshold: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.c_min < 1.0 < self.c_max):
            raise ValueError(f"need 0 <= c_min < 1 < c_max, got c_min={self.c_min}, c_max={self.c_max}")
        if not (self.sharpness > 0.0 and np.isfinite(self.sharpness)):
            raise ValueError(f"sharpness must be positive and finite, got {self.sharpness}")
        if not (self.threshold > 0.0 and np.isfinite(self.threshold)):
            raise ValueError(f"threshold must be positive and finite, got {self.threshold}")


@dataclass(frozen=True)
class LossKind:
    """Selects a loss family plus its temperature and (for the adaptive
    loss) weight configuration and ablation mode."""

    name: str
    beta: float = 0.1
    weight_config: WeightConfig | None = None
    ablation: str = ABLATION_FULL

    def __post_init__(self) -> None:
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}, expected one of {LOSS_NAMES}")
        if not (self.beta > 0.0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.name == MADPO and self.weight_config is None:
            raise ValueError("the adaptive loss requires a weight_config")
        if self.ablation != ABLATION_FULL and self.name != MADPO:
            raise ValueError("ablation modes only apply to the adaptive loss")


def sigmoid(z):
    """Logistic function, overflow-safe for |z| up to the float64 range."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    """log(1 + e^z) without overflow; equals -log(sigmoid(-z))."""
    z = np.asarray(z, dtype=float)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def log_sigmoid(z):
    """log(sigmoid(z)) computed as -softplus(-z)."""
    return -softplus(np.negative(z))


def coefficient(margin_abs, cfg: WeightConfig):
    """Margin-to-coefficient map: strictly decreasing from near c_max to c_min.

    Evaluates c_min + (c_max - c_min) * sigmoid(-(sharpness*(h - threshold)
    + log A)) with A = (c_max - 1)/(1 - c_min), which is the logistic form
    of c_min + (c_max - c_min) / (1 + A * exp(sharpness*(h - threshold)))
    and is exactly 1 at h = threshold.
    """
    margin_abs = np.asarray(margin_abs, dtype=float)
    if np.any(margin_abs < 0):
        raise ValueError("coefficient expects a non-negative margin magnitude")
    log_a = np.log(cfg.c_max - 1.0) - np.log1p(-cfg.c_min)
    z = cfg.sharpness * (margin_abs - cfg.threshold) + log_a
    out = cfg.c_min + (cfg.c_max - cfg.c_min) * sigmoid(-z)
    return out if np.ndim(out) else float(out)


def weight(reward_margin, cfg: WeightConfig):
    """Piecewise adaptive weight.

    Above -threshold the weight is sigmoid(c(|h|)*h) / sigmoid(h); at and
    below -threshold it is exactly 1, which caps the blow-up the ratio
    would have for large negative margins. Both branches meet at 1.
    """
    h = np.asarray(reward_margin, dtype=float)
    if not np.all(np.isfinite(h)):
        raise ValueError("reward margin must be finite")
    # the ratio branch is only evaluated on [-threshold, inf); at the clamp
    # point it equals 1, so the where() below never mixes branch values
    hc = np.maximum(h, -cfg.threshold)
    ratio = np.exp(log_sigmoid(coefficient(np.abs(hc), cfg) * hc) - log_sigmoid(hc))
    out = np.where(h > -cfg.threshold, ratio, 1.0)
    return out if out.ndim else float(out)


def weight_ablated(reward_margin, cfg: WeightConfig, mode: str = ABLATION_FULL):
    """Weight with one side of the piecewise behaviour switched off.

    ``amp_only`` forces 1 on high-margin pairs (|h| >= threshold) so only
    amplification remains; ``reg_only`` forces 1 on low-margin pairs so
    only the high-margin dampening remains.
    """
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}")
    w = weight(reward_margin, cfg)
    if mode == ABLATION_FULL:
        return w
    h = np.asarray(reward_margin, dtype=float)
    high = np.abs(h) >= cfg.threshold
    out = np.where(high, 1.0, w) if mode == ABLATION_AMP_ONLY else np.where(high, w, 1.0)
    return out if out.ndim else float(out)


@lru_cache(maxsize=None)
def weight_supremum(cfg: WeightConfig) -> float:
    """Numeric upper bound of the weight for a config.

    Scans a dense grid on [-threshold, 200] (the weight is exactly 1 to
    the left of -threshold) and refines around the grid argmax by golden
    section, so the returned value upper-bounds the weight at any point
    to machine precision.
    """
    grid = np.arange(-cfg.threshold, _W_SUP_GRID_HI + _W_SUP_GRID_STEP, _W_SUP_GRID_STEP)
    values = weight(grid, cfg)
    k = int(np.argmax(values))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    refined = _golden_max(lambda h: float(weight(h, cfg)), float(lo), float(hi))
    return max(float(values[k]), refined, 1.0)


def _golden_max(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return max(fc, fd)


def _check_finite(policy_margin, reward_margin) -> tuple[np.ndarray, np.ndarray]:
    pm = np.asarray(policy_margin, dtype=float)
    rm = np.asarray(reward_margin, dtype=float)
    if not np.all(np.isfinite(pm)):
        raise ValueError("policy margin must be finite")
    if not np.all(np.isfinite(rm)):
        raise ValueError("reward margin must be finite")
    return pm, rm


def _madpo_weight(reward_margin, kind: LossKind):
    return weight_ablated(reward_margin, kind.weight_config, kind.ablation)


def per_pair_loss(policy_margin, reward_margin, kind: LossKind):
    """Loss of a single preference pair.

    DPO (and the batch-adapted variant, whose effective temperature the
    trainer substitutes into ``kind.beta``): softplus(-beta*h). IPO:
    squared distance of the margin to its 1/(2*beta) target. The adaptive
    loss multiplies the DPO loss by the reward-margin weight.
    """
    pm, rm = _check_finite(policy_margin, reward_margin)
    if kind.name == IPO:
        out = (pm - 0.5 / kind.beta) ** 2
    else:
        out = softplus(-kind.beta * pm)
        if kind.name == MADPO:
            out = _madpo_weight(rm, kind) * out
    return out if np.ndim(out) else float(out)


def per_pair_grad(policy_margin, reward_margin, kind: LossKind):
    """d loss / d policy_margin (exact closed form)."""
    pm, rm = _check_finite(policy_margin, reward_margin)
    if kind.name == IPO:
        out = 2.0 * (pm - 0.5 / kind.beta)
    else:
        out = -kind.beta * sigmoid(-kind.beta * pm)
        if kind.name == MADPO:
            out = _madpo_weight(rm, kind) * out
    return out if np.ndim(out) else float(out)


def per_pair_hessian(policy_margin, reward_margin, kind: LossKind):
    """d^2 loss / d policy_margin^2 (exact closed form; constant 2 for IPO)."""
    pm, rm = _check_finite(policy_margin, reward_margin)
    if kind.name == IPO:
        out = np.full_like(pm, 2.0)
    else:
        # sigmoid(z)*sigmoid(-z), factors computed separately: the naive
        # s*(1-s) cancels to zero once s rounds to 1
        z = kind.beta * pm
        out = kind.beta**2 * sigmoid(z) * sigmoid(-z)
        if kind.name == MADPO:
            out = _madpo_weight(rm, kind) * out
    return out if np.ndim(out) else float(out)

"""Numerical certification of the optimality, boundedness, and
smoothness claims behind the adaptive loss.

Each check pairs a closed-form prediction with an independent numeric
oracle (golden-section minimisation, central finite differences, dense
grid scans, or Monte Carlo choice simulation) and reports the worst
disagreement found.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .losses import (
    LossKind,
    WeightConfig,
    coefficient,
    log_sigmoid,
    sigmoid,
    softplus,
    weight,
    weight_supremum,
)
from .world import simulate_win_rate

# hyperparameter grid exercised by the full suite: thresholds cross the
# amplification ceilings with the dampening floor at the reciprocal
GRID_THRESHOLDS = (2.0, 4.0, 7.0, 10.0)
GRID_C_MAX = (2.0, 3.0, 4.0)


def grid_configs(sharpness: float = 1.0) -> list[WeightConfig]:
    return [
        WeightConfig(c_min=1.0 / c_max, c_max=c_max, sharpness=sharpness, threshold=t)
        for t in GRID_THRESHOLDS
        for c_max in GRID_C_MAX
    ]


def golden_section_minimize(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Argmin of a unimodal function on [lo, hi] to interval width tol."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def expected_pair_loss(target: float, reward_margin: float, cfg: WeightConfig) -> float:
    """Expected weighted loss of a pair as a function of the margin target.

    Taking the choice expectation of the weighted log loss over both pair
    orientations collapses, by construction of the weight, to a
    cross-entropy in ``target``: against logits c(|h|)*h on the
    low-margin branch (|h| < threshold), and against the unnormalised
    pair (sigmoid(c*h), sigmoid(-h)) on the high-margin branch. Strictly
    convex in ``target`` either way.
    """
    h = float(reward_margin)
    c = coefficient(abs(h), cfg)
    if abs(h) < cfg.threshold:
        p_win, p_lose = sigmoid(c * h), sigmoid(-c * h)
    else:
        p_win, p_lose = sigmoid(c * h), sigmoid(-h)
    return float(p_win * softplus(-target) + p_lose * softplus(target))


def optimal_target_low(reward_margin: float, cfg: WeightConfig) -> float:
    """Closed-form optimal margin target on the low-margin branch: c(|h|)*h."""
    h = float(reward_margin)
    if abs(h) >= cfg.threshold:
        raise ValueError(f"|margin| must be below the threshold {cfg.threshold}")
    return coefficient(abs(h), cfg) * h


def optimal_target_high(reward_margin: float, c: float) -> float:
    """Stationary target on the high-margin branch.

    Solves sigmoid(c*h) * sigmoid(-t) = sigmoid(-h) * sigmoid(t) for t,
    i.e. t = log(sigmoid(c*h)) - log(sigmoid(-h)). At c = 1 this equals h
    identically (pure DPO recovery).
    """
    h = float(reward_margin)
    return float(log_sigmoid(c * h) - log_sigmoid(-h))


def optimal_target_high_derivative(reward_margin: float, c: float, target: float) -> float:
    """Implicit-function derivative dt*/dc at the high-branch stationary point.

    Positive whenever the margin is positive, which is the monotonicity
    claim being certified.
    """
    h = float(reward_margin)
    num = h * sigmoid(c * h) * sigmoid(-c * h) * sigmoid(-target)
    den = sigmoid(target) * sigmoid(-target) * (sigmoid(c * h) + sigmoid(-h))
    return float(num / den)


@dataclass
class OracleResult:
    grid: list[float]
    predicted: list[float]
    observed: list[float]
    max_abs_error: float
    monotone: bool = True

    def __post_init__(self) -> None:
        if len(self.grid) != len(self.predicted) or len(self.grid) != len(self.observed):
            raise ValueError("grids must be aligned")


def check_monotone_in_c(reward_margin: float, c_grid) -> OracleResult:
    """Closed-form targets across a coefficient grid, with monotonicity
    and the sign of the implicit-function derivative asserted."""
    c_grid = [float(c) for c in c_grid]
    if any(c <= 0 for c in c_grid) or any(b <= a for a, b in zip(c_grid, c_grid[1:])):
        raise ValueError("c grid must be strictly increasing and positive")
    predicted = [optimal_target_high(reward_margin, c) for c in c_grid]
    observed = [
        golden_section_minimize(
            lambda t: _high_branch_loss(t, reward_margin, c), -100.0, 100.0)
        for c in c_grid
    ]
    for c, t in zip(c_grid, predicted):
        if optimal_target_high_derivative(reward_margin, c, t) <= 0:
            raise AssertionError(f"derivative sign violated at c={c}")
    monotone = all(b > a for a, b in zip(predicted, predicted[1:]))
    if not monotone and len(predicted) > 1:
        bad = next((i for i in range(len(predicted) - 1) if predicted[i + 1] <= predicted[i]))
        raise AssertionError(
            f"targets not strictly increasing between c={c_grid[bad]} and c={c_grid[bad + 1]}")
    err = max((abs(p - o) for p, o in zip(predicted, observed)), default=0.0)
    return OracleResult(grid=c_grid, predicted=predicted, observed=observed,
                        max_abs_error=err, monotone=monotone)


def _high_branch_loss(target: float, h: float, c: float) -> float:
    return float(sigmoid(c * h) * softplus(-target) + sigmoid(-h) * softplus(target))


def estimate_lipschitz_w(cfg: WeightConfig, grid_lo: float, grid_hi: float,
                         step: float) -> float:
    """Largest forward difference quotient of the weight on a grid."""
    if not (grid_lo < grid_hi and step > 0):
        raise ValueError("need grid_lo < grid_hi and step > 0")
    grid = np.arange(grid_lo, grid_hi, step)
    w0 = weight(grid, cfg)
    w1 = weight(grid + step, cfg)
    return float(np.max(np.abs(w1 - w0)) / step)


@dataclass
class FiniteDiffReport:
    n_samples: int
    max_rel_err_grad: float = 0.0
    max_rel_err_hess: float = 0.0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def finite_diff_suite(n_samples: int, seed: int, rel_tol: float = 1e-5) -> FiniteDiffReport:
    """Randomised gradient/Hessian check against central differences.

    Samples (policy margin, reward margin, config, loss family) tuples,
    compares the analytic first and second margin derivatives with
    central differences of the loss and of the gradient, and checks the
    derivative bounds: |grad| <= w_sup * beta and hess in (0, w_sup *
    beta^2 / 4] for the log-loss families, hess = 2 for the squared loss.

    Looks the loss functions up through the module at call time so a
    deliberately broken implementation is caught (mutation checking).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rand = np.random.default_rng(seed)
    report = FiniteDiffReport(n_samples=n_samples)
    kinds = [losses.DPO, losses.IPO, losses.MADPO]
    configs = grid_configs() + [
        WeightConfig(c_min=rand.uniform(0.0, 0.9), c_max=rand.uniform(1.1, 5.0),
                     sharpness=rand.uniform(0.2, 3.0), threshold=rand.uniform(0.5, 12.0))
        for _ in range(8)
    ]

    for i in range(n_samples):
        name = kinds[i % len(kinds)]
        beta = float(rand.uniform(0.02, 1.5))
        cfg = configs[int(rand.integers(len(configs)))]
        kind = LossKind(name=name, beta=beta,
                        weight_config=cfg if name == losses.MADPO else None)
        pm = float(rand.uniform(-25.0, 25.0))
        rm = float(rand.uniform(-15.0, 15.0))

        grad = losses.per_pair_grad(pm, rm, kind)
        hess = losses.per_pair_hessian(pm, rm, kind)
        eps = 1e-6 * max(1.0, abs(pm))
        fd_grad = (losses.per_pair_loss(pm + eps, rm, kind)
                   - losses.per_pair_loss(pm - eps, rm, kind)) / (2 * eps)
        fd_hess = (losses.per_pair_grad(pm + eps, rm, kind)
                   - losses.per_pair_grad(pm - eps, rm, kind)) / (2 * eps)

        rel_g = abs(grad - fd_grad) / max(1.0, abs(grad), abs(fd_grad))
        rel_h = abs(hess - fd_hess) / max(1.0, abs(hess), abs(fd_hess))
        report.max_rel_err_grad = max(report.max_rel_err_grad, rel_g)
        report.max_rel_err_hess = max(report.max_rel_err_hess, rel_h)
        if rel_g > rel_tol:
            report.violations.append(f"grad mismatch {rel_g:.2e} at ({pm}, {rm}, {name}, beta={beta})")
        if rel_h > rel_tol:
            report.violations.append(f"hess mismatch {rel_h:.2e} at ({pm}, {rm}, {name}, beta={beta})")

        if name == losses.IPO:
            if hess != 2.0:
                report.violations.append(f"squared-loss hessian is {hess}, expected 2")
            continue
        w_sup = weight_supremum(cfg) if name == losses.MADPO else 1.0
        if abs(grad) > w_sup * beta * (1.0 + 1e-12):
            report.violations.append(
                f"grad bound violated: |{grad}| > {w_sup * beta} at ({pm}, {rm}, {name})")
        if not (0.0 < hess <= w_sup * beta**2 / 4.0 * (1.0 + 1e-12)):
            report.violations.append(
                f"hess bound violated: {hess} outside (0, {w_sup * beta**2 / 4}] at ({pm}, {rm}, {name})")
    return report


# -- full suite -------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(name: str, fn) -> CheckResult:
    start = time.perf_counter()
    try:
        detail = fn()
        passed = True
    except (AssertionError, ValueError) as exc:
        detail = str(exc)
        passed = False
    return CheckResult(name=name, passed=passed, detail=detail,
                       seconds=time.perf_counter() - start)


def check_low_margin_targets(n_points: int = 100, tol: float = 1e-6) -> str:
    worst = 0.0
    for cfg in grid_configs():
        span = cfg.threshold - 1e-9
        for h in np.linspace(-span + span / n_points, span - span / n_points, n_points):
            predicted = optimal_target_low(float(h), cfg)
            observed = golden_section_minimize(
                lambda t: expected_pair_loss(t, float(h), cfg), -100.0, 100.0)
            worst = max(worst, abs(predicted - observed))
            if abs(predicted - observed) > tol:
                raise AssertionError(
                    f"low-margin target off by {abs(predicted - observed):.2e} at h={h}, cfg={cfg}")
            if 0 < h < cfg.threshold and predicted <= h:
                raise AssertionError(f"no amplification at h={h}, cfg={cfg}")
    return f"max |closed form - minimizer| = {worst:.2e} over {12 * n_points} points"


def check_high_margin_targets(tol: float = 1e-6) -> str:
    worst = 0.0
    c_grid = np.linspace(0.05, 1.0, 20)
    for threshold in GRID_THRESHOLDS:
        for h in [threshold + k for k in range(9)]:
            result = check_monotone_in_c(h, c_grid)
            worst = max(worst, result.max_abs_error)
            if result.max_abs_error > tol:
                raise AssertionError(f"high-margin target off by {result.max_abs_error:.2e} at h={h}")
            if abs(result.predicted[-1] - h) > 1e-10:
                raise AssertionError(f"c=1 recovery violated at h={h}: {result.predicted[-1]}")
            if any(t >= h for t in result.predicted[:-1]):
                raise AssertionError(f"no dampening below c=1 at h={h}")
    return f"max |closed form - minimizer| = {worst:.2e} over 36 margins x 20 coefficients"


def check_derivatives(n_samples: int = 10_000, seed: int = 1234) -> str:
    report = finite_diff_suite(n_samples, seed)
    if not report.ok:
        raise AssertionError("; ".join(report.violations[:3]))
    return (f"{n_samples} samples, max rel err grad {report.max_rel_err_grad:.2e}, "
            f"hess {report.max_rel_err_hess:.2e}, zero bound violations")


def check_weight_function(eps: float = 1e-7) -> str:
    details = []
    for cfg in grid_configs():
        pivot = coefficient(cfg.threshold, cfg)
        if abs(pivot - 1.0) > 1e-12:
            raise AssertionError(f"coefficient at the threshold is {pivot}, not 1, for {cfg}")
        lip = estimate_lipschitz_w(cfg, -cfg.threshold - 5.0, 50.0, 1e-3)
        lip_half = estimate_lipschitz_w(cfg, -cfg.threshold - 5.0, 50.0, 5e-4)
        if not np.isfinite(lip) or abs(lip_half - lip) > 0.05 * lip:
            raise AssertionError(f"Lipschitz estimate unstable for {cfg}: {lip} vs {lip_half}")
        probe = abs(weight(-cfg.threshold + eps, cfg) - 1.0)
        if probe > 10.0 * eps * lip:
            raise AssertionError(f"discontinuity at -threshold for {cfg}: gap {probe:.2e}")
        origin = abs(weight(eps, cfg) - weight(-eps, cfg))
        if origin > 10.0 * eps * lip:
            raise AssertionError(f"discontinuity at 0 for {cfg}: gap {origin:.2e}")
        below = weight(np.array([-cfg.threshold, -cfg.threshold - 1.0, -50.0]), cfg)
        if not np.all(below == 1.0):
            raise AssertionError(f"weight not exactly 1 below -threshold for {cfg}")
        details.append(lip)
    return f"12 configs, Lipschitz estimates in [{min(details):.3f}, {max(details):.3f}]"


def check_choice_model(n_draws: int = 100_000, seed: int = 20240) -> str:
    for gap in (0.0, 1.0, 2.0, 3.0):
        p = float(sigmoid(gap))
        rate = simulate_win_rate(gap, n_draws, seed)
        bound = 3.0 * np.sqrt(p * (1.0 - p) / n_draws)
        if abs(rate - p) > bound:
            raise AssertionError(
                f"win rate {rate:.5f} outside 3 sigma of {p:.5f} at gap {gap}")
    return f"4 reward gaps x {n_draws} draws, all within 3 binomial sigmas"


def run_full_suite() -> list[CheckResult]:
    return [
        _timed("low_margin_targets", check_low_margin_targets),
        _timed("high_margin_targets", check_high_margin_targets),
        _timed("derivative_and_bounds", check_derivatives),
        _timed("weight_function", check_weight_function),
        _timed("choice_model", check_choice_model),
    ]

"""Acceptance suite: one test per criterion, each printing a PASS line
with the measured quantities when it holds.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import time

import numpy as np
import pytest

from madpo.experiment import ExperimentConfig, generate_datasets, run_cell
from madpo.losses import (
    DPO,
    MADPO,
    LossKind,
    WeightConfig,
    coefficient,
    per_pair_loss,
    sigmoid,
    softplus,
    weight,
)
from madpo.optim import OptimizerConfig
from madpo.policy import implicit_margins
from madpo.reward_model import RewardModel
from madpo.trainer import TrainConfig, beta_batch_adapt, train_policy
from madpo.verify import (
    estimate_lipschitz_w,
    finite_diff_suite,
    golden_section_minimize,
    grid_configs,
    expected_pair_loss,
    optimal_target_high,
    optimal_target_low,
)
from madpo.world import (
    TIER_LOW,
    GroundTruthOracle,
    build_dataset,
    margin_features,
    shuffle_and_split,
    simulate_win_rate,
)

ORACLE = GroundTruthOracle.from_seed(0)


def report(criterion: int, message: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS  {message}")


def test_criterion_1_low_margin_optimality_oracle():
    """Closed-form low-margin targets match the numeric minimizer to 1e-6."""
    start = time.perf_counter()
    worst = 0.0
    n_points = 100
    for cfg in grid_configs():
        span = cfg.threshold
        grid = np.linspace(-span, span, n_points + 2)[1:-1]  # interior points
        for h in grid:
            predicted = optimal_target_low(float(h), cfg)
            observed = golden_section_minimize(
                lambda t: expected_pair_loss(t, float(h), cfg), -100.0, 100.0)
            worst = max(worst, abs(predicted - observed))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-6
    assert elapsed < 10.0
    report(1, f"12 configs x {n_points} margins, max error {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_high_margin_optimality_oracle():
    """High-margin stationary targets: closed form vs minimizer, strictly
    increasing in the coefficient, exact recovery at c = 1."""
    start = time.perf_counter()
    worst = 0.0
    c_grid = np.linspace(0.05, 1.0, 20)
    for tau in (2.0, 4.0, 7.0, 10.0):
        for step in range(9):
            h = tau + step
            targets = []
            for c in c_grid:
                predicted = optimal_target_high(h, float(c))
                observed = golden_section_minimize(
                    lambda t, c=float(c): float(
                        sigmoid(c * h) * softplus(-t) + sigmoid(-h) * softplus(t)),
                    -100.0, 100.0)
                worst = max(worst, abs(predicted - observed))
                targets.append(predicted)
            assert all(b > a for a, b in zip(targets, targets[1:])), f"not increasing at h={h}"
            assert abs(targets[-1] - h) <= 1e-10, f"c=1 recovery off at h={h}"
    elapsed = time.perf_counter() - start
    assert worst <= 1e-6
    assert elapsed < 10.0
    report(2, f"36 margins x 20 coefficients, max error {worst:.2e}, {elapsed:.2f}s")


def test_criterion_3_derivative_check_and_bounds():
    """10^4 randomized samples: analytic derivatives match central
    differences at 1e-5 and the gradient/Hessian bounds hold."""
    suite = finite_diff_suite(10_000, seed=1234)
    assert suite.ok, suite.violations[:3]
    assert suite.max_rel_err_grad <= 1e-5
    assert suite.max_rel_err_hess <= 1e-5
    report(3, f"10000 samples, max rel err grad {suite.max_rel_err_grad:.2e} "
              f"hess {suite.max_rel_err_hess:.2e}, zero bound violations")


def test_criterion_4_weight_function_properties():
    """Coefficient pivot, weight continuity, exact unit branch, and
    refinement-stable Lipschitz estimates across the hyperparameter grid."""
    eps = 1e-7
    lipschitz = []
    for cfg in grid_configs():
        assert abs(coefficient(cfg.threshold, cfg) - 1.0) <= 1e-12
        lip = estimate_lipschitz_w(cfg, -cfg.threshold - 5.0, 50.0, 1e-3)
        lip_half = estimate_lipschitz_w(cfg, -cfg.threshold - 5.0, 50.0, 5e-4)
        assert np.isfinite(lip)
        assert abs(lip_half - lip) <= 0.05 * lip
        assert abs(weight(-cfg.threshold + eps, cfg) - 1.0) <= 10.0 * eps * lip
        assert abs(weight(eps, cfg) - weight(-eps, cfg)) <= 10.0 * eps * lip
        assert np.all(weight(np.array([-cfg.threshold, -2 * cfg.threshold, -50.0]), cfg) == 1.0)
        lipschitz.append(lip)
    report(4, f"12 configs: pivot exact, continuity probes within bound, "
              f"Lipschitz in [{min(lipschitz):.3f}, {max(lipschitz):.3f}]")


def test_criterion_5_choice_model_consistency():
    """Empirical win rates over 1e5 noisy choices match the logistic
    probability within three binomial standard deviations."""
    start = time.perf_counter()
    details = []
    for gap in (0.0, 1.0, 2.0, 3.0):
        p = float(sigmoid(gap))
        rate = simulate_win_rate(gap, 100_000, seed=20240)
        bound = 3.0 * np.sqrt(p * (1.0 - p) / 100_000)
        assert abs(rate - p) <= bound, f"gap {gap}: {rate} vs {p} (bound {bound})"
        details.append(f"{gap:.0f}:{rate:.4f}")
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    report(5, f"win rates {{{', '.join(details)}}} within 3 sigma, {elapsed:.2f}s")


def test_criterion_6_adaptive_loss_degenerates_to_dpo():
    """A neutral weight config reproduces the plain trajectory step by step."""
    neutral = WeightConfig(c_min=1.0 - 1e-9, c_max=1.0 + 1e-9, sharpness=1.0, threshold=1e6)
    records = build_dataset(TIER_LOW, 200, seed=9, oracle=ORACLE)
    margins = RewardModel(max_epochs=60).fit(records[:160], records[160:]).margin(records)
    common = dict(epochs=2, batch_size=64, seed=2, track_params=True,
                  optimizer=OptimizerConfig(learning_rate=1e-2))
    _, rep_m = train_policy(records,
                            TrainConfig(loss=LossKind(name=MADPO, beta=0.1, weight_config=neutral),
                                        **common),
                            reward_margins=margins)
    _, rep_d = train_policy(records,
                            TrainConfig(loss=LossKind(name=DPO, beta=0.1), **common))
    assert len(rep_m.param_trace) == len(rep_d.param_trace) > 0
    worst = max(float(np.max(np.abs(pm - pd)))
                for pm, pd in zip(rep_m.param_trace, rep_d.param_trace))
    assert worst <= 1e-6
    report(6, f"{len(rep_m.param_trace)} steps on 200 pairs, max per-step deviation {worst:.2e}")


def test_criterion_7_batch_temperature_mechanics():
    """The batch rule returns the base temperature exactly at the target
    mean margin, goes negative on the constructed batch, and the trainer
    counts the incident."""
    beta, incident = beta_batch_adapt(0.1, [1.5, -1.5, 0.5, -0.5], m=0.9, h0=0.0)
    assert beta == 0.1 and not incident

    beta, incident = beta_batch_adapt(0.1, [-2.0, -2.0, -2.0], m=0.6, h0=0.0)
    assert beta == pytest.approx(-0.02, rel=1e-12)
    assert incident

    # zero initial parameters give zero margins, so h0 = 2 constructs
    # mean margin - h0 = -2 on the first batch
    from madpo.trainer import BetaDpoConfig

    records = build_dataset(TIER_LOW, 120, seed=5, oracle=ORACLE)
    cfg = TrainConfig(loss=LossKind(name="beta_dpo", beta=0.1), epochs=1, batch_size=120,
                      seed=0, beta_dpo=BetaDpoConfig(m=0.6, h0=2.0, keep_fraction=1.0))
    _, rep = train_policy(records, cfg)
    assert rep.negative_beta_incidents >= 1
    assert rep.effective_betas[0] == pytest.approx(-0.02, rel=1e-12)
    report(7, "base beta reproduced exactly at the target mean; constructed batch "
              f"adapted to {rep.effective_betas[0]:.4f} and incremented the incident counter")


def test_criterion_8_squared_loss_target():
    """Training a single pair under the squared loss drives the policy
    margin to 1/(2 beta) = 5."""
    records = build_dataset(TIER_LOW, 1, seed=5, oracle=ORACLE)
    cfg = TrainConfig(loss=LossKind(name="ipo", beta=0.1), epochs=4000, batch_size=1,
                      seed=0, optimizer=OptimizerConfig(learning_rate=0.05))
    theta, _ = train_policy(records, cfg)
    margin = float(implicit_margins(theta, records)[0])
    assert margin == pytest.approx(5.0, abs=0.01)
    report(8, f"single-pair policy margin converged to {margin:.5f} (target 5.0 +/- 0.01)")


def test_criterion_9_directional_low_tier_comparison(tmp_path):
    """Adaptive two-step training matches or beats the fixed-temperature
    baseline on the low-quality tier, per seed and on seed average.

    The configuration is the tuned-but-fixed benchmark instance shipped
    as the package defaults; the effect at desk scale is small, so the
    bar is directional (>= on at least 4 of 5 seeds, mean strictly above).
    """
    start = time.perf_counter()
    cfg = ExperimentConfig(out_dir=str(tmp_path), tiers=(TIER_LOW,),
                           methods=("dpo", "madpo"), seeds=(0, 1, 2, 3, 4))
    assert cfg.n_pairs == 1200 and abs(cfg.train_fraction * cfg.n_pairs - 1000) < 1
    generate_datasets(cfg)
    dpo_means = [run_cell(cfg, "dpo", TIER_LOW, s).mean_reward for s in cfg.seeds]
    madpo_means = [run_cell(cfg, "madpo", TIER_LOW, s).mean_reward for s in cfg.seeds]
    elapsed = time.perf_counter() - start

    wins = sum(m >= d for m, d in zip(madpo_means, dpo_means))
    assert wins >= 4, f"adaptive won only {wins}/5 seeds: {list(zip(madpo_means, dpo_means))}"
    assert np.mean(madpo_means) > np.mean(dpo_means)
    assert elapsed < 300.0
    report(9, f"per-seed wins {wins}/5, means {np.mean(madpo_means):.4f} vs "
              f"{np.mean(dpo_means):.4f} (gap {np.mean(madpo_means) - np.mean(dpo_means):+.4f}), "
              f"1000 train pairs / 200 eval prompts, {elapsed:.1f}s")


def test_criterion_10_plugin_stability_probe():
    """Loss shift under reward-parameter perturbations is controlled by the
    policy-term bound times the weight's Lipschitz constant."""
    wcfg = WeightConfig(c_min=0.5, c_max=2.0, sharpness=1.0, threshold=4.0)
    records = build_dataset(TIER_LOW, 600, seed=7, oracle=ORACLE)
    train, evl = shuffle_and_split(records, seed=11, train_fraction=0.8)
    model = RewardModel(max_epochs=120).fit(train, evl)
    diffs = margin_features(train)
    margins = model.margin(train)

    rand = np.random.default_rng(0)
    theta = 0.3 * rand.standard_normal(diffs.shape[1])
    policy_margins = diffs @ theta
    kind = LossKind(name=MADPO, beta=0.1, weight_config=wcfg)
    base_loss = per_pair_loss(policy_margins, margins, kind)
    l_theta_max = float(np.max(np.abs(-softplus(-0.1 * policy_margins))))
    lip = estimate_lipschitz_w(wcfg, -wcfg.threshold - 5.0, 40.0, 1e-4)

    worst_slack = np.inf
    for _ in range(100):
        delta = rand.standard_normal(diffs.shape[1])
        delta *= rand.uniform(0.0, 0.1) / np.linalg.norm(delta)
        shifted_margins = margins + diffs @ delta
        shifted_loss = per_pair_loss(policy_margins, shifted_margins, kind)
        lhs = np.abs(shifted_loss - base_loss)
        rhs = l_theta_max * lip * np.abs(shifted_margins - margins) + 1e-9
        assert np.all(lhs <= rhs)
        worst_slack = min(worst_slack, float(np.min(rhs - lhs)))
    report(10, f"100 perturbations x {len(train)} records, bound held "
               f"(min slack {worst_slack:.2e}, L_theta_max {l_theta_max:.3f}, L_w {lip:.3f})")

"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run on its own with ``python tests/test_acceptance.py``; under pytest the
lines are printed in the terminal summary.
"""

import time

import numpy as np

from conftest import ACCEPTANCE
from oracles import central_difference, lp_transport_cost, relative_error
from test_distributions import random_enumerable
from test_ot import pair_spread, permutation_cases, random_profile, uniform
from test_reward import near_kink, random_instance
from profile_irl.cli import main
from profile_irl.distributions import (
    augment,
    discount_matrix,
    exact_return_distribution,
    exact_reward_distribution,
    rescaled_traj_distribution,
    total_variation,
)
from profile_irl.eval import Setting, ablate_ot, gamma_sweep, gt_profile, noise_sweep, recovery_trial
from profile_irl.mdp import (
    Trajectory,
    benchmark_grid,
    build_gridworld,
    enumerate_trajectories,
    figure1_corridor,
    two_corridor,
    two_corridor_policy,
)
from profile_irl.ot import exact_plan, ot_loss, sinkhorn_plan
from profile_irl.reward import LossWeights, Standardizer, SupervisionSets, loss_terms
from profile_irl.trainer import TrainConfig


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_ot_exactness():
    rng = np.random.default_rng(100)
    worst = 0.0
    start = time.perf_counter()
    for i in range(200):
        a, b = random_profile(rng), random_profile(rng)
        p = 1.0 if i % 2 else 2.0
        ours = exact_plan(a, b, p)[0] ** p
        worst = max(worst, abs(ours - lp_transport_cost(a.locations, a.weights, b.locations, b.weights, p)))
    elapsed = time.perf_counter() - start
    record("OT exactness", worst < 1e-9 and elapsed < 10,
           f"max |exact - LP| = {worst:.2e} over 200 instances in {elapsed:.1f}s")


def test_sinkhorn_contract():
    rng = np.random.default_rng(101)
    worst_marginal, worst_ratio, violations = 0.0, 0.0, 0
    for _ in range(100):
        a, b = random_profile(rng), random_profile(rng)
        spread = max(pair_spread(a, b), 1e-3)
        exact = exact_plan(a, b, 2.0)[0]
        gaps = []
        for f in (1e-1, 1e-2, 1e-3):
            cost, plan = sinkhorn_plan(a, b, 2.0, f * spread)
            worst_marginal = max(worst_marginal, plan.marginal_violation())
            # monotonicity is checked on tightly converged solves, see README
            gaps.append(sinkhorn_plan(a, b, 2.0, f * spread, tol=1e-12)[0] - exact)
        worst_ratio = max(worst_ratio, (cost - exact) / max(exact, 1e-12))
        violations += not (gaps[0] >= gaps[1] - 1e-9 and gaps[1] >= gaps[2] - 1e-9)
    ok = worst_marginal <= 1e-6 and worst_ratio <= 0.01 and violations == 0
    record("Sinkhorn contract", ok,
           f"max marginal violation {worst_marginal:.1e}, max relative gap at 1e-3*spread "
           f"{worst_ratio:.2e}, non-monotone instances {violations}/100")


def test_gradient_fidelity():
    worst = 0.0
    for seed in range(50):
        model, data, target, sup, gamma, p = random_instance(seed + 1000)
        if near_kink(model, model.params):
            model = model.with_params(model.params + 0.01)
        mat = discount_matrix(data, gamma, model.n_states)
        std = Standardizer.from_profile(target)
        prof = std.profile(target)
        sup = SupervisionSets(sup.pairs, tuple((i, float(std(y))) for i, y in sup.fixed))
        frozen = loss_terms(model, model.state_rewards(), mat, mat, prof, sup, LossWeights(),
                            p, 0.0, 0, seed).targets
        for weights in (LossWeights(1, 0, 0), LossWeights(0, 1, 0), LossWeights(0, 0, 1)):
            def value(theta, weights=weights):
                m = model.with_params(theta)
                return loss_terms(m, m.state_rewards(), mat, mat, prof, sup, weights, p,
                                  frozen_targets=frozen).total

            analytic = loss_terms(model, model.state_rewards(), mat, mat, prof, sup, weights, p,
                                  frozen_targets=frozen).grad
            worst = max(worst, relative_error(analytic, central_difference(value, model.params.copy())))
    record("Gradient fidelity", worst < 1e-4,
           f"max relative error {worst:.1e} over 50 instances x 3 loss terms")


def test_two_corridor_regression():
    out = rescaled_traj_distribution([(Trajectory(tuple(range(2))), 0.8),
                                      (Trajectory(tuple(range(8))), 0.2)])
    rescale_err = max(abs(p - 0.5) for _, p in out)
    spec = two_corridor()
    trajs = enumerate_trajectories(build_gridworld(spec), two_corridor_policy(spec))
    probs = sorted((p for _, p in trajs), reverse=True)
    enum_err = max(abs(probs[0] - 0.8), abs(probs[1] - 0.2)) if len(probs) == 2 else np.inf
    record("Two-corridor regression", rescale_err < 1e-12 and enum_err < 1e-9,
           f"rescaled error {rescale_err:.1e}, enumeration error {enum_err:.1e}")


def test_gamma_zero_identity():
    worst = 0.0
    for seed in range(20):
        mdp, pol, r = random_enumerable(seed + 500)
        worst = max(worst, total_variation(exact_return_distribution(mdp, pol, r, 0.0),
                                           exact_reward_distribution(mdp, pol, r)))
    record("Gamma-zero identity", worst < 1e-9, f"max TV distance {worst:.1e} over 20 MDPs")


def test_symmetry_invariance():
    target = uniform(-1.0, 0.0, 2.0)
    broken = checked = 0
    for seed in range(10):
        data, r, perms = permutation_cases(seed + 200)
        batch = augment(data).suffixes
        base = ot_loss(r, batch, target, 0.0, lam=0.0, seed=7)[0]
        for perm in perms:
            checked += 1
            broken += ot_loss(r[perm], batch, target, 0.0, lam=0.0, seed=7)[0] != base
    record("Symmetry invariance", broken == 0,
           f"{checked - broken}/{checked} permuted losses bit-identical")


def test_end_to_end_recovery():
    mdp = build_gridworld(benchmark_grid())
    start = time.perf_counter()
    passed, corrs = 0, []
    for seed in range(10):
        cell = recovery_trial(mdp, seed)
        corrs.append(cell.pearson if cell.pearson is not None else np.nan)
        passed += (cell.pearson is not None and cell.pearson >= 0.9
                   and cell.reopt_return >= cell.best_demo_return)
    elapsed = time.perf_counter() - start
    record("End-to-end recovery", passed >= 8 and elapsed < 300,
           f"{passed}/10 seeds pass, mean Pearson {np.nanmean(corrs):.3f}, {elapsed:.0f}s")


def test_ablation_trend():
    mdp = build_gridworld(benchmark_grid())
    setting = Setting.generate(mdp, 100, 200, 0)
    target = gt_profile(augment(setting.dataset), mdp.gt_reward, 0.9, 30)
    with_ot, without = ablate_ot(setting, target, [20], 4, TrainConfig(), n_seeds=10)
    a, b = with_ot["pearson_mean"], without["pearson_mean"]
    record("Ablation trend", a > b, f"mean Pearson with OT {a:.3f}, without {b:.3f}")


def test_noise_trend():
    mdp = build_gridworld(benchmark_grid())
    setting = Setting.generate(mdp, 100, 200, 0)
    rows = noise_sweep(setting, (0.1, 0.5, 1.0), TrainConfig(), n_seeds=10)
    means = [r["pearson_mean"] for r in rows]
    record("Noise trend", means[0] >= means[2],
           "mean Pearson at sigma 0.1/0.5/1: " + "/".join(f"{m:.3f}" for m in means))


def test_gamma_trend():
    mdp = build_gridworld(figure1_corridor())
    setting = Setting.generate(mdp, 100, 200, 0)
    rows = gamma_sweep(setting, (0.0, 0.5, 0.7, 0.9), TrainConfig(), n_seeds=10)
    means = [r["pearson_mean"] for r in rows]
    record("Gamma trend", means[3] >= means[0],
           "mean Pearson at gamma 0/0.5/0.7/0.9: " + "/".join(f"{m:.3f}" for m in means))


def test_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        d = str(tmp_path / name)
        assert main(["--run-dir", d, "--seed", "5", "gen-demos", "--env", "grid10", "--n", "30",
                     "--held-out", "0", "--profile"]) == 0
        assert main(["--run-dir", d, "fit", "--n-epochs", "60", "--checkpoint-every", "20"]) == 0
        files = sorted((tmp_path / name / "checkpoints").iterdir())
        outputs.append([p.read_bytes() for p in files] + [(tmp_path / name / "log.csv").read_bytes()])
    same = outputs[0] == outputs[1]
    record("Determinism", same and len(outputs[0]) == 4,
           f"{len(outputs[0]) - 1} checkpoints and log {'bit-identical' if same else 'differ'}")


if __name__ == "__main__":
    import sys
    from pathlib import Path

    import pytest

    sys.exit(pytest.main([str(Path(__file__)), "-q", "-p", "no:cacheprovider",
                         "-W", "ignore::pytest.PytestAssertRewriteWarning"]))

"""
End-to-end checks on the shipped toy task, averaged over five run seeds: the refinement
trend, the K ablation, value transfer, exact guidance against the oracle, the reward/KL
frontier and optimality gaps.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from app.schemas.config import GuidanceConfig, SweepSpec
from app.services.eval_report import (
    run_ablation,
    run_beam_comparison,
    run_beta_sweep,
    run_value_transfer,
)
from app.services.guided_decode import GuidedPolicy
from app.services.ivr_loop import run_ivr
from app.services.oracle import (
    EnumerableMdp,
    base_step_policy,
    exact_kl,
    exact_policy_value,
    optimality_gap,
    solve_fixed_point,
)
from app.services.tasks import build_policy, build_reward, build_value, toy_experiment
from app.services.value import TabularValue, load_value

SEEDS = [0, 1, 2, 3, 4]
BETA_GRID = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0]


def _pooled_se(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size))


@pytest.fixture(scope="module")
def toy():
    config = toy_experiment()
    vocab = config.task.vocabulary
    max_length = config.task.max_length
    reward = build_reward(config.reward, max_length)
    return SimpleNamespace(
        config=config,
        prompts=config.task.prompts,
        max_length=max_length,
        base=build_policy(config.policy, vocab),
        base_b=build_policy(config.transfer_policy, vocab),
        reward=reward,
        initial=build_value(config.value, vocab, max_length, reward),
    )


@pytest.fixture(scope="module")
def values_by_seed(toy, tmp_path_factory):
    """Checkpointed values of iterations 1..3 for every run seed."""
    out = tmp_path_factory.mktemp("refinement")
    by_seed = {}
    for seed in SEEDS:
        cfg = toy.config.ivr.model_copy(update={"iterations": 3, "seed": seed})
        _, reports = run_ivr(
            cfg,
            toy.prompts,
            toy.base,
            toy.reward,
            toy.initial,
            toy.max_length,
            out / f"seed_{seed}",
            workers=2,
        )
        by_seed[seed] = [load_value(r.checkpoint) for r in reports]
    return by_seed


@pytest.fixture(scope="module")
def toy_mdp(toy):
    return EnumerableMdp(
        toy.base, toy.reward, toy.prompts, toy.max_length, temperature=0.7, budget=1_000_000
    )


@pytest.fixture(scope="module")
def oracle(toy_mdp):
    solution = solve_fixed_point(toy_mdp, 1.0)
    assert solution.converged
    return solution


def test_refinement_improves_beam_reward(toy, values_by_seed):
    per_variant: dict[str, list[float]] = {}
    for seed, values in values_by_seed.items():
        variants = [(f"iter{i}", v) for i, v in enumerate(values, start=1)]
        rows = run_beam_comparison(
            toy.base, variants, toy.reward, toy.config.beam, toy.prompts, [seed]
        )
        for row in rows:
            per_variant.setdefault(row.variant, []).append(row.mean_reward)

    base, it1, it2, it3 = (
        np.array(per_variant[name]) for name in ("base", "iter1", "iter2", "iter3")
    )
    assert base.mean() <= it1.mean()
    assert it1.mean() <= it2.mean() + _pooled_se(it1, it2)
    assert it2.mean() - base.mean() >= 3 * _pooled_se(it2, base)
    assert it3.mean() - it2.mean() < it2.mean() - it1.mean()


def test_four_trajectories_per_prompt_beat_one(toy, tmp_path):
    k1, k4, k5 = run_ablation(
        "K",
        [1, 4, 5],
        toy.config.ivr,
        toy.config.beam,
        toy.base,
        toy.reward,
        toy.initial,
        toy.prompts,
        SEEDS,
        toy.max_length,
        tmp_path,
        workers=2,
    )
    n = len(SEEDS)
    pooled = float(np.hypot(k4.std_reward, k1.std_reward)) / np.sqrt(n)
    assert k4.mean_reward - k1.mean_reward >= 2 * pooled
    assert k5.mean_reward - k4.mean_reward < k4.mean_reward - k1.mean_reward


def test_value_transfers_to_another_base(toy, values_by_seed):
    unguided, guided = [], []
    for seed, values in values_by_seed.items():
        rows = run_value_transfer(
            values[1], toy.base, toy.base_b, toy.reward, toy.config.beam, toy.prompts, [seed]
        )
        by_name = {r.variant: r.mean_reward for r in rows}
        unguided.append(by_name["B-unguided"])
        guided.append(by_name["B-guided"])
    assert np.mean(guided) - np.mean(unguided) >= 2 * _pooled_se(guided, unguided)


def test_optimal_value_guidance_matches_optimal_policy(toy, toy_mdp, oracle):
    exact = TabularValue(toy.reward.reward_range, {k: (v, 1) for k, v in oracle.v_star.items()})
    guided = GuidedPolicy(
        toy.base, exact, GuidanceConfig(beta=1.0, k=6, block_size=1, temperature=0.7)
    )
    pi_guided = toy_mdp.policy_matrix(guided)
    pi_star = np.stack([oracle.pi_star[toy_mdp.states[n].key] for n in toy_mdp.internal])
    reachable = toy_mdp.reach(pi_guided)[toy_mdp.internal] > 0
    assert reachable.all()

    total_variation = 0.5 * np.abs(pi_guided - pi_star).sum(axis=1)
    assert total_variation.max() <= 1e-9


def test_optimal_reward_rises_with_beta(toy_mdp):
    rewards = [exact_policy_value(toy_mdp, solve_fixed_point(toy_mdp, b)) for b in BETA_GRID]
    assert all(later >= earlier - 1e-9 for earlier, later in zip(rewards, rewards[1:]))
    beta_zero = solve_fixed_point(toy_mdp, 0.0)
    assert exact_kl(toy_mdp, beta_zero, base_step_policy(toy_mdp)).total == pytest.approx(
        0.0, abs=1e-12
    )


def test_learned_value_reward_rises_with_beta(toy, values_by_seed):
    spec = SweepSpec(beta_grid=BETA_GRID, metric_estimator="exact", mode="tokenwise")
    rewards = []
    for values in values_by_seed.values():
        rows = run_beta_sweep(
            toy.base,
            values[1],
            toy.reward,
            spec,
            toy.prompts,
            toy.config.guidance,
            toy.max_length,
            workers=2,
        )
        assert rows[0].beta == 0.0 and rows[0].mean_token_kl == 0.0
        rewards.append([r.mean_reward for r in rows])

    by_beta = np.array(rewards).T
    for lower, higher in zip(by_beta, by_beta[1:]):
        assert higher.mean() >= lower.mean() - _pooled_se(higher, lower)
    assert by_beta[-1].mean() > by_beta[0].mean()


def test_optimality_gap_shrinks_over_iterations(toy, toy_mdp, oracle, values_by_seed):
    guidance = GuidanceConfig(beta=1.0, k=6, block_size=1, temperature=0.7)
    gaps = np.array(
        [
            [optimality_gap(toy_mdp, oracle, GuidedPolicy(toy.base, v, guidance)) for v in values]
            for values in values_by_seed.values()
        ]
    ).T
    for earlier, later in zip(gaps, gaps[1:]):
        assert later.mean() <= earlier.mean() + _pooled_se(earlier, later)

    base_gap = optimality_gap(toy_mdp, oracle, base_step_policy(toy_mdp))
    assert base_gap > 0
    exact = TabularValue(toy.reward.reward_range, {k: (v, 1) for k, v in oracle.v_star.items()})
    assert abs(optimality_gap(toy_mdp, oracle, GuidedPolicy(toy.base, exact, guidance))) <= 1e-9

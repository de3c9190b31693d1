"""Experiment runners (beta sweeps, beam comparisons, ablations, block timing) and emitters."""

import csv
import json
import logging
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, TypeVar

import numpy as np
from pydantic import BaseModel

from app.core.config import settings
from app.core.errors import InvariantViolation, IoFailure
from app.schemas.config import BeamConfig, GuidanceConfig, IvrConfig, SweepSpec
from app.schemas.mdp import State
from app.schemas.reports import AblationRow, ComparisonRow, SpeedRow, SweepRow, TransferRow
from app.services.distribution import kl_divergence
from app.services.guided_decode import (
    GuidedPolicy,
    blockwise_beam_search,
    sample_guided_blockwise,
    sample_guided_tokenwise,
)
from app.services.ivr_loop import run_ivr
from app.services.mdp import extend_state
from app.services.oracle import EnumerableMdp, exact_kl, exact_policy_value
from app.services.policy import PolicyBackend
from app.services.reward import RewardModel
from app.services.value import ConstantValue, CountingValue, ValueFunction

logger = logging.getLogger(__name__)

Row = TypeVar("Row", bound=BaseModel)


def _spread(per_seed_means: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(per_seed_means, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def _sweep_point(
    base: PolicyBackend,
    value: ValueFunction,
    reward: RewardModel,
    spec: SweepSpec,
    guidance: GuidanceConfig,
    beta: float,
    prompts: Sequence[Sequence[int]],
    max_length: int,
    prompt_weights: Sequence[float] | None,
) -> SweepRow:
    guided = GuidedPolicy(base, value, guidance.model_copy(update={"beta": beta}))
    if spec.mode == "tokenwise":
        guided = guided.with_block_size(1)
    reference = GuidedPolicy(base, value, guidance.model_copy(update={"beta": 0.0}))
    started = time.perf_counter()

    if spec.metric_estimator == "exact":
        mdp = EnumerableMdp(
            base, reward, prompts, max_length, prompt_weights, temperature=guidance.temperature
        )
        mean_reward = exact_policy_value(mdp, guided)
        kl = exact_kl(mdp, guided, reference)
        elapsed = time.perf_counter() - started
        return SweepRow(
            beta=beta,
            mean_reward=mean_reward,
            std_reward=0.0,
            mean_token_kl=kl.per_token,
            wall_clock_per_token=elapsed / max(kl.expected_length, 1e-12),
        )

    sample = sample_guided_tokenwise if spec.mode == "tokenwise" else sample_guided_blockwise
    seed_means: list[float] = []
    token_kls: list[float] = []
    tokens = 0
    for seed in spec.seeds:
        rewards: list[float] = []
        for i, prompt in enumerate(prompts):
            for j in range(spec.samples_per_point):
                sample_seed = seed * 1_000_003 + i * spec.samples_per_point + j
                t = sample(guided, prompt, max_length, sample_seed)
                rewards.append(reward.score(t.prompt, t.completion))
                tokens += len(t.completion)

                # per-step KL between the sampled and the reference step distributions
                state = State(prompt=t.prompt)
                step_kl = 0.0
                for token in t.completion:
                    p = guided.step_distribution(state).support_dense()
                    q = reference.step_distribution(state).support_dense()
                    step_kl += kl_divergence(p, q)
                    state = extend_state(state, token, base.vocab)
                token_kls.append(step_kl / len(t.completion))
        seed_means.append(float(np.mean(rewards)))

    mean_reward, std_reward = _spread(seed_means)
    return SweepRow(
        beta=beta,
        mean_reward=mean_reward,
        std_reward=std_reward,
        mean_token_kl=float(np.mean(token_kls)),
        wall_clock_per_token=(time.perf_counter() - started) / max(tokens, 1),
    )


def run_beta_sweep(
    base: PolicyBackend,
    value: ValueFunction,
    reward: RewardModel,
    spec: SweepSpec,
    prompts: Sequence[Sequence[int]],
    guidance: GuidanceConfig,
    max_length: int,
    prompt_weights: Sequence[float] | None = None,
    workers: int | None = None,
) -> list[SweepRow]:
    """
    Reward and token-level KL against the beta = 0 policy for every beta in the grid.

    Exact mode enumerates every completion (std_reward is 0); monte_carlo mode samples
    samples_per_point trajectories per prompt and seed, with std_reward taken over the
    per-seed means.
    """
    if not prompts:
        raise InvariantViolation("prompts must be nonempty")

    def point(beta: float) -> SweepRow:
        return _sweep_point(
            base, value, reward, spec, guidance, beta, prompts, max_length, prompt_weights
        )

    with ThreadPoolExecutor(max_workers=workers or settings.IVR_WORKERS) as pool:
        rows = list(pool.map(point, spec.beta_grid))
    logger.info(
        f"Beta sweep over {len(rows)} points ({spec.metric_estimator}, {spec.mode})",
        extra={"operation": "run_beta_sweep", "count": len(rows)},
    )
    return sorted(rows, key=lambda r: r.beta)


def _beam_rewards(
    base: PolicyBackend,
    value: ValueFunction,
    reward: RewardModel,
    beam: BeamConfig,
    prompts: Sequence[Sequence[int]],
    seeds: Sequence[int],
) -> list[float]:
    """
    Mean beam-search reward over prompts, one entry per seed.

    Each prompt gets beam.samples_per_prompt searches; search j of prompt i under `seed`
    is seeded with seed * 1_000_003 + i * samples_per_prompt + j.
    """
    n = beam.samples_per_prompt
    means = []
    for seed in seeds:
        rewards = []
        for i, prompt in enumerate(prompts):
            for j in range(n):
                cfg = beam.model_copy(update={"seed": seed * 1_000_003 + i * n + j})
                t = blockwise_beam_search(base, value, prompt, cfg)
                rewards.append(reward.score(t.prompt, t.completion))
        means.append(float(np.mean(rewards)))
    return means


def run_beam_comparison(
    base: PolicyBackend,
    variants: Sequence[tuple[str, ValueFunction]],
    reward: RewardModel,
    beam: BeamConfig,
    prompts: Sequence[Sequence[int]],
    seeds: Sequence[int],
) -> list[ComparisonRow]:
    """
    One row per value variant plus a leading "base" row: unguided sampling, i.e. a beam of
    width 1 under a constant value.
    """
    if not variants:
        raise InvariantViolation("beam comparison needs at least one variant")
    runs: list[tuple[str, ValueFunction, BeamConfig]] = [
        ("base", ConstantValue(0.0), beam.model_copy(update={"beam_width": 1}))
    ]
    runs.extend((name, value, beam) for name, value in variants)

    samples = len(seeds) * len(prompts) * beam.samples_per_prompt
    rows = []
    for name, value, cfg in runs:
        mean, std = _spread(_beam_rewards(base, value, reward, cfg, prompts, seeds))
        rows.append(
            ComparisonRow(variant=name, mean_reward=mean, std_reward=std, samples=samples)
        )
        logger.info(
            f"Beam comparison {name}: mean reward {mean:.4f}",
            extra={"operation": "run_beam_comparison", "count": len(seeds)},
        )
    return rows


def run_ablation(
    axis: Literal["K", "iterations"],
    grid: Sequence[int],
    ivr: IvrConfig,
    beam: BeamConfig,
    base: PolicyBackend,
    reward: RewardModel,
    initial_value: ValueFunction,
    prompts: Sequence[Sequence[int]],
    seeds: Sequence[int],
    max_length: int,
    out_dir: str | Path,
    workers: int | None = None,
) -> list[AblationRow]:
    """Full IVR runs varying only `axis`; each row is the mean beam-search reward over seeds."""
    if not grid:
        raise InvariantViolation("ablation grid must be nonempty")
    rows = []
    for g in grid:
        per_seed = []
        for seed in seeds:
            cfg = ivr.model_copy(update={axis: g, "seed": seed})
            run_dir = Path(out_dir) / f"ablate_{axis}_{g}" / f"seed_{seed}"
            value, _ = run_ivr(
                cfg, prompts, base, reward, initial_value, max_length, run_dir, workers=workers
            )
            per_seed.extend(_beam_rewards(base, value, reward, beam, prompts, [seed]))
        mean, std = _spread(per_seed)
        rows.append(AblationRow(axis=axis, value=g, mean_reward=mean, std_reward=std))
        logger.info(
            f"Ablation {axis}={g}: mean reward {mean:.4f}",
            extra={"operation": "run_ablation", "count": len(seeds)},
        )
    return rows


def measure_block_speed(
    base: PolicyBackend,
    value: ValueFunction,
    guidance: GuidanceConfig,
    block_sizes: Sequence[int],
    prompts: Sequence[Sequence[int]],
    seeds: Sequence[int],
    max_length: int,
) -> list[SpeedRow]:
    """
    Wall-clock and value evaluations per generated token for blockwise sampling at each
    block size; relative_time is normalized to the largest block size.
    """
    if not block_sizes:
        raise InvariantViolation("block_sizes must be nonempty")
    measured: list[tuple[int, float, float]] = []
    for b in block_sizes:
        counter = CountingValue(value)
        guided = GuidedPolicy(base, counter, guidance.model_copy(update={"block_size": b}))
        tokens = 0
        started = time.perf_counter()
        for seed in seeds:
            for i, prompt in enumerate(prompts):
                t = sample_guided_blockwise(guided, prompt, max_length, seed * 1_000_003 + i)
                tokens += len(t.completion)
        elapsed = time.perf_counter() - started
        measured.append((b, elapsed / tokens, counter.count / tokens))

    reference = max(measured, key=lambda m: m[0])[1]
    rows = [
        SpeedRow(
            block_size=b,
            relative_time=per_token / reference if reference > 0 else 1.0,
            value_evals_per_token=evals,
            wall_clock_per_token=per_token,
        )
        for b, per_token, evals in measured
    ]
    logger.info(
        f"Measured block speed for block sizes {list(block_sizes)}",
        extra={"operation": "measure_block_speed", "count": len(rows)},
    )
    return rows


def run_value_transfer(
    value: ValueFunction,
    base_a: PolicyBackend,
    base_b: PolicyBackend,
    reward: RewardModel,
    beam: BeamConfig,
    prompts: Sequence[Sequence[int]],
    seeds: Sequence[int],
) -> list[TransferRow]:
    """Guide both the policy a value was trained against (A) and a different one (B)."""
    unguided = beam.model_copy(update={"beam_width": 1})
    runs = [
        ("A-unguided", base_a, ConstantValue(0.0), unguided),
        ("A-guided", base_a, value, beam),
        ("B-unguided", base_b, ConstantValue(0.0), unguided),
        ("B-guided", base_b, value, beam),
    ]
    samples = len(seeds) * len(prompts) * beam.samples_per_prompt
    rows = []
    for name, base, v, cfg in runs:
        mean, std = _spread(_beam_rewards(base, v, reward, cfg, prompts, seeds))
        rows.append(TransferRow(variant=name, mean_reward=mean, std_reward=std, samples=samples))
    return rows


def _six_significant(value: object) -> object:
    if isinstance(value, float):
        return float(f"{value:.6g}")
    return value


def _format_cell(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_report(
    rows: Sequence[Row],
    path: str | Path,
    fmt: Literal["csv", "json"],
    row_type: type[Row],
) -> Path:
    """
    Write rows as CSV (header = row_type's field order) or as a JSON array of objects.

    Floats are written with 6 significant digits in both formats.
    """
    target = Path(path)
    header = list(row_type.model_fields)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with target.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                for row in rows:
                    dumped = row.model_dump()
                    writer.writerow([_format_cell(dumped[name]) for name in header])
        elif fmt == "json":
            payload = [
                {name: _six_significant(v) for name, v in row.model_dump().items()} for row in rows
            ]
            target.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        else:
            raise InvariantViolation(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write report {target}: {exc}") from exc
    return target


def report_filename(kind: str, task: str, seeds: Sequence[int], fmt: str) -> str:
    """e.g. sweep_toy_seeds0-4.csv"""
    seed_part = f"seeds{min(seeds)}-{max(seeds)}" if seeds else "seeds-none"
    return f"{kind}_{task}_{seed_part}.{fmt}"

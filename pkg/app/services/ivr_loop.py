"""Iterative value refinement: collect, label, regress, re-guide, repeat."""

import copy
import json
import logging
import os
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigError, InvariantViolation, IoFailure
from app.schemas.config import IvrConfig
from app.schemas.mdp import Trajectory
from app.schemas.reports import IterationReport, RunManifest
from app.services.guided_decode import (
    GuidedPolicy,
    compose_guidance,
    sample_base,
    sample_guided_blockwise,
)
from app.services.policy import PolicyBackend
from app.services.reward import RewardModel, label_trajectories
from app.services.trajectory_store import TrajectoryStore
from app.services.value import (
    ValueFunction,
    build_regression_set,
    load_value,
    save_value,
    train_value,
)

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectories.jsonl"
CHECKPOINT_FILE = "value.json"
RUN_MANIFEST_FILE = "run_manifest.json"


def collect_trajectories(
    policy: PolicyBackend | GuidedPolicy,
    prompts: Sequence[Sequence[int]],
    K: int,
    temperature: float,
    seed_base: int,
    max_length: int,
    iteration: int = 0,
    workers: int | None = None,
) -> list[Trajectory]:
    """
    K unlabeled trajectories per prompt, grouped by prompt in input order.

    Trajectory k of prompt i uses seed seed_base + i*K + k. A base policy is sampled at
    `temperature`; a guided policy uses blockwise sampling with its own configuration. Any
    failure discards the whole batch.
    """
    if K < 1:
        raise InvariantViolation(f"K must be >= 1, got {K}")
    if not prompts:
        raise InvariantViolation("prompts must be nonempty")

    def collect_prompt(item: tuple[int, Sequence[int]]) -> list[Trajectory]:
        i, prompt = item
        seeds = [seed_base + i * K + k for k in range(K)]
        if isinstance(policy, GuidedPolicy):
            return [
                sample_guided_blockwise(policy, prompt, max_length, s, iteration) for s in seeds
            ]
        return [sample_base(policy, prompt, max_length, s, temperature, iteration) for s in seeds]

    with ThreadPoolExecutor(max_workers=workers or settings.IVR_WORKERS) as pool:
        per_prompt = list(pool.map(collect_prompt, enumerate(prompts)))
    return [t for batch in per_prompt for t in batch]


def iteration_seed_base(seed: int, index: int, n_prompts: int, K: int) -> int:
    """Disjoint seed ranges per (run seed, iteration)."""
    return seed * 1_000_003 + (index - 1) * n_prompts * K


@dataclass
class IvrState:
    """Mutable orchestration state threaded through iterations."""

    base: PolicyBackend
    initial_value: ValueFunction
    value: ValueFunction
    collector: GuidedPolicy | None = None
    data: list[Trajectory] = field(default_factory=list)
    reports: list[IterationReport] = field(default_factory=list)


def _collection_policy(
    state: IvrState, config: IvrConfig, index: int
) -> PolicyBackend | GuidedPolicy:
    if index == 1:
        return state.base
    guidance = config.collection_guidance()
    if config.compose_guidance and state.collector is not None:
        return compose_guidance(state.collector, state.value, guidance)
    return GuidedPolicy(state.base, state.value, guidance)


def run_iteration(
    state: IvrState,
    prompts: Sequence[Sequence[int]],
    reward: RewardModel,
    config: IvrConfig,
    index: int,
    max_length: int,
    out_dir: str | Path,
    workers: int | None = None,
) -> tuple[ValueFunction, IterationReport]:
    """
    One refinement iteration; updates `state` in place and returns the new value and report.

    Iteration 1 collects from the base policy, later iterations from the base guided by the
    latest value at beta_collect. The trajectory file and checkpoint are written before the
    state is updated, so a failed write leaves `state` untouched.
    """
    started = time.perf_counter()
    collector = _collection_policy(state, config, index)
    seed_base = iteration_seed_base(config.seed, index, len(prompts), config.K)
    collected = collect_trajectories(
        collector, prompts, config.K, config.temperature, seed_base, max_length, index, workers
    )
    labeled = label_trajectories(reward, collected)

    data = state.data + labeled if config.data_mode == "accumulate" else labeled
    regression = build_regression_set(data)
    start_value = state.value if config.warm_start else copy.deepcopy(state.initial_value)
    trained, loss_trace = train_value(start_value, regression, config.train)

    iter_dir = Path(out_dir) / f"iter_{index}"
    trajectory_file = iter_dir / TRAJECTORY_FILE
    if trajectory_file.exists():
        try:
            trajectory_file.unlink()
        except OSError as exc:
            raise IoFailure(f"cannot reset {trajectory_file}: {exc}") from exc
    TrajectoryStore(trajectory_file, state.base.vocab).extend(labeled)
    checkpoint = save_value(trained, iter_dir / CHECKPOINT_FILE)

    rewards = np.array([t.reward for t in labeled], dtype=np.float64)
    report = IterationReport(
        index=index,
        policy_tag=labeled[0].policy_tag,
        trajectories=len(labeled),
        regression_samples=len(regression),
        mean_reward=float(rewards.mean()),
        std_reward=float(rewards.std()),
        final_loss=loss_trace[-1],
        loss_trace=loss_trace,
        trajectory_file=str(trajectory_file),
        checkpoint=str(checkpoint),
    )

    state.collector = collector if isinstance(collector, GuidedPolicy) else None
    state.value = trained
    state.data = data
    state.reports.append(report)
    logger.info(
        f"IVR iteration {index}: mean reward {report.mean_reward:.4f} over "
        f"{report.trajectories} trajectories",
        extra={
            "operation": "run_iteration",
            "iteration": index,
            "count": report.trajectories,
            "duration_ms": round((time.perf_counter() - started) * 1000, 2),
        },
    )
    return trained, report


def write_manifest(manifest: RunManifest, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2), encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write run manifest {path}: {exc}") from exc


def read_manifest(path: Path) -> RunManifest:
    try:
        return RunManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise IoFailure(f"cannot read run manifest {path}: {exc}") from exc
    except (ValidationError, json.JSONDecodeError) as exc:
        raise InvariantViolation(f"malformed run manifest {path}: {exc}") from exc


def _restore(state: IvrState, manifest: RunManifest, config: IvrConfig) -> None:
    """Rebuild orchestration state from the iterations a manifest records as complete."""
    for report in manifest.iterations:
        collector = _collection_policy(state, config, report.index)
        labeled = TrajectoryStore(report.trajectory_file, state.base.vocab).read_all()
        state.collector = collector if isinstance(collector, GuidedPolicy) else None
        state.data = state.data + labeled if config.data_mode == "accumulate" else labeled
        state.value = load_value(report.checkpoint)
        state.reports.append(report)


def _without_iterations(config_dump: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in config_dump.items() if k != "iterations"}


def run_ivr(
    config: IvrConfig,
    prompts: Sequence[Sequence[int]],
    base: PolicyBackend,
    reward: RewardModel,
    initial_value: ValueFunction,
    max_length: int,
    out_dir: str | Path,
    resume: bool = False,
    manifest_name: str = RUN_MANIFEST_FILE,
    workers: int | None = None,
) -> tuple[ValueFunction, list[IterationReport]]:
    """
    Run config.iterations iterations, rewriting the run manifest after each one.

    With `resume`, iterations already listed in an existing manifest are restored from
    their checkpoints and trajectory files instead of being rerun; only `iterations` may
    differ from the recorded configuration.

    Raises:
        ConfigError: If resuming a manifest written with a different configuration.
    """
    out = Path(out_dir)
    manifest_path = out / manifest_name
    config_dump = config.model_dump(mode="json")
    state = IvrState(base=base, initial_value=initial_value, value=initial_value)
    manifest = RunManifest(config=config_dump)

    if resume and manifest_path.exists():
        previous = read_manifest(manifest_path)
        if _without_iterations(previous.config) != _without_iterations(config_dump):
            raise ConfigError("ivr", "resume manifest was written with a different configuration")
        _restore(state, previous, config)
        manifest.iterations = list(state.reports)
        logger.info(
            f"Resuming IVR run after {len(state.reports)} completed iterations",
            extra={"operation": "run_ivr", "iteration": len(state.reports)},
        )

    for index in range(len(state.reports) + 1, config.iterations + 1):
        _, report = run_iteration(
            state, prompts, reward, config, index, max_length, out, workers
        )
        manifest.iterations.append(report)
        write_manifest(manifest, manifest_path)

    if not manifest_path.exists():
        write_manifest(manifest, manifest_path)
    return state.value, state.reports

"""
Command-line entry point.

Precedence of settings: command-line flags > config file > built-in defaults (the toy
task). Exit codes: 0 success, 1 user error (bad input or configuration), 2 internal error.
Every subcommand writes `<command>_manifest.json` into the output directory, including
failed ones (status "error" with the failure message).
"""

import argparse
import json
import logging
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

import yaml
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigError, IoFailure, IvrError, UserError
from app.core.logging import setup_logging
from app.schemas.config import ExperimentConfig
from app.schemas.reports import (
    AblationRow,
    CommandManifest,
    ComparisonRow,
    SpeedRow,
    SweepRow,
    TransferRow,
)
from app.services.eval_report import (
    emit_report,
    measure_block_speed,
    report_filename,
    run_ablation,
    run_beam_comparison,
    run_beta_sweep,
    run_value_transfer,
)
from app.services.guided_decode import (
    GuidedPolicy,
    blockwise_beam_search,
    sample_base,
    sample_guided_blockwise,
    sample_guided_tokenwise,
)
from app.services.ivr_loop import run_ivr
from app.services.oracle import (
    EnumerableMdp,
    base_step_policy,
    exact_kl,
    exact_policy_value,
    optimality_gap,
    solve_fixed_point,
)
from app.services.policy import PolicyBackend
from app.services.reward import RewardModel, label_trajectories
from app.services.tasks import build_policy, build_reward, build_value, load_prompts, toy_experiment
from app.services.trajectory_store import TrajectoryStore
from app.services.value import ValueFunction, load_value

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


def _csv_floats(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip()]


def _csv_ints(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


class _Parser(argparse.ArgumentParser):
    """Usage errors are user errors: exit 1 instead of argparse's default 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER_ERROR, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML experiment config (default: toy task)")
    common.add_argument("--output-dir", help="Output directory (default: config, IVR_OUTPUT_DIR)")
    common.add_argument("--seed", type=int, help="Experiment seed")
    common.add_argument("--workers", type=int, help="Collection/sweep worker count")
    common.add_argument("--log-level", help="Override LOG_LEVEL")

    parser = _Parser(prog="ivr", description="Value-guided decoding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="Run iterative value refinement")
    train.add_argument("--iterations", type=int)
    train.add_argument("--K", type=int, dest="K")
    train.add_argument("--beta-collect", type=float)
    train.add_argument("--resume", action="store_true", help="Continue from an existing manifest")

    sample = sub.add_parser("sample", parents=[common], help="Sample trajectories")
    sample.add_argument("--mode", choices=["base", "tokenwise", "blockwise"], default="blockwise")
    sample.add_argument("--value", help="Value checkpoint guiding the sampler")
    sample.add_argument("--beta", type=float)
    sample.add_argument("--samples", type=int, default=4, help="Trajectories per prompt")

    beam = sub.add_parser("beam", parents=[common], help="Blockwise beam search comparison")
    beam.add_argument(
        "--variant",
        action="append",
        default=[],
        metavar="NAME=CHECKPOINT",
        help="Value variant; default trains and compares every IVR iteration",
    )
    beam.add_argument("--beam-width", type=int)
    beam.add_argument("--block-size", type=int)

    sweep = sub.add_parser("sweep", parents=[common], help="Reward vs KL beta sweep")
    sweep.add_argument("--betas", type=_csv_floats)
    sweep.add_argument("--value", help="Value checkpoint; default trains one first")
    sweep.add_argument("--estimator", choices=["exact", "monte_carlo"])
    sweep.add_argument("--mode", choices=["tokenwise", "blockwise"])
    sweep.add_argument("--format", choices=["csv", "json"], default="csv")

    ablate = sub.add_parser("ablate", parents=[common], help="Ablate K or iterations")
    ablate.add_argument("--axis", choices=["K", "iterations"])
    ablate.add_argument("--grid", type=_csv_ints)
    ablate.add_argument("--format", choices=["csv", "json"], default="csv")

    oracle = sub.add_parser("oracle", parents=[common], help="Exact optimal policy and value")
    oracle.add_argument("--beta", type=float)
    oracle.add_argument("--tol", type=float)
    oracle.add_argument("--max-iters", type=int)

    speed = sub.add_parser("speed", parents=[common], help="Blockwise timing and value-eval counts")
    speed.add_argument("--block-sizes", type=_csv_ints)
    speed.add_argument("--value", help="Value checkpoint (default: untrained tabular value)")
    speed.add_argument("--format", choices=["csv", "json"], default="csv")

    transfer = sub.add_parser("transfer", parents=[common], help="Guide a second base policy")
    transfer.add_argument("--format", choices=["csv", "json"], default="csv")

    sub.add_parser("validate-config", parents=[common], help="Validate a config and exit")

    serve = sub.add_parser("serve", parents=[common], help="Serve the base policy over HTTP")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)

    return parser


def _load_raw_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return toy_experiment().model_dump(mode="json")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"{path} does not parse: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path} must contain a mapping at the top level")
    return raw


def _set(raw: dict[str, Any], dotted: str, value: Any) -> None:
    if value is None:
        return
    node = raw
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge the config file with flag overrides and validate the result."""
    raw = _load_raw_config(args.config)
    overrides = {
        "output_dir": args.output_dir,
        "seed": args.seed,
        "workers": args.workers,
        "ivr.seed": args.seed,
        "ivr.iterations": getattr(args, "iterations", None),
        "ivr.K": getattr(args, "K", None),
        "ivr.beta_collect": getattr(args, "beta_collect", None),
        "beam.beam_width": getattr(args, "beam_width", None),
        "beam.block_size": getattr(args, "block_size", None),
        "sweep.beta_grid": getattr(args, "betas", None),
        "sweep.metric_estimator": getattr(args, "estimator", None),
        "sweep.mode": getattr(args, "mode", None) if args.command == "sweep" else None,
        "ablation.axis": getattr(args, "axis", None),
        "ablation.grid": getattr(args, "grid", None),
        "oracle.beta": getattr(args, "beta", None) if args.command == "oracle" else None,
        "oracle.tol": getattr(args, "tol", None),
        "oracle.max_iters": getattr(args, "max_iters", None),
        "speed.block_sizes": getattr(args, "block_sizes", None),
        "guidance.beta": getattr(args, "beta", None) if args.command == "sample" else None,
    }
    for dotted, value in overrides.items():
        _set(raw, dotted, value)
    return ExperimentConfig.model_validate(raw)


class Experiment:
    """Objects built once from a validated config and shared by the command handlers."""

    def __init__(self, config: ExperimentConfig, output_dir: Path):
        self.config = config
        self.output_dir = output_dir
        self.vocab = config.task.vocabulary
        self.max_length = config.task.max_length
        self.prompts = load_prompts(config.task)
        self.weights = config.task.prompt_weights
        self.base: PolicyBackend = build_policy(config.policy, self.vocab)
        self.reward: RewardModel = build_reward(config.reward, self.max_length)
        self.beam = config.beam.model_copy(update={"max_length": self.max_length})

    def initial_value(self) -> ValueFunction:
        return build_value(self.config.value, self.vocab, self.max_length, self.reward)

    def train(self, run_dir: Path, resume: bool = False) -> tuple[ValueFunction, list[str]]:
        value, reports = run_ivr(
            self.config.ivr,
            self.prompts,
            self.base,
            self.reward,
            self.initial_value(),
            self.max_length,
            run_dir,
            resume=resume,
            workers=self.config.workers,
        )
        return value, [r.checkpoint for r in reports]

    def value_or_train(self, checkpoint: str | None, run_dir: Path) -> ValueFunction:
        if checkpoint is not None:
            return load_value(checkpoint)
        return self.train(run_dir)[0]


def _report_path(exp: Experiment, kind: str, seeds: Sequence[int], fmt: str) -> Path:
    return exp.output_dir / report_filename(kind, exp.config.task.name, seeds, fmt)


def cmd_train(args: argparse.Namespace, exp: Experiment) -> list[str]:
    _, checkpoints = exp.train(exp.output_dir, resume=args.resume)
    return [str(exp.output_dir / "run_manifest.json"), *checkpoints]


def cmd_sample(args: argparse.Namespace, exp: Experiment) -> list[str]:
    store = TrajectoryStore(exp.output_dir / f"samples_{args.mode}.jsonl", exp.vocab)
    seed = exp.config.seed
    guided = None
    if args.mode != "base":
        value = exp.value_or_train(args.value, exp.output_dir / "sample_train")
        guided = GuidedPolicy(exp.base, value, exp.config.guidance)

    trajectories = []
    for i, prompt in enumerate(exp.prompts):
        for j in range(args.samples):
            s = seed * 1_000_003 + i * args.samples + j
            if guided is None:
                temperature = exp.config.guidance.temperature
                t = sample_base(exp.base, prompt, exp.max_length, s, temperature)
            elif args.mode == "tokenwise":
                t = sample_guided_tokenwise(guided, prompt, exp.max_length, s)
            else:
                t = sample_guided_blockwise(guided, prompt, exp.max_length, s)
            trajectories.append(t)
    store.extend(label_trajectories(exp.reward, trajectories))
    return [str(store.path)]


def cmd_beam(args: argparse.Namespace, exp: Experiment) -> list[str]:
    variants: list[tuple[str, ValueFunction]] = []
    for item in args.variant:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError("variant", f"expected NAME=CHECKPOINT, got {item!r}")
        variants.append((name, load_value(path)))
    if not variants:
        _, checkpoints = exp.train(exp.output_dir / "beam_train")
        variants = [(f"ivr-{i}", load_value(c)) for i, c in enumerate(checkpoints, start=1)]

    seeds = exp.config.sweep.seeds
    rows = run_beam_comparison(exp.base, variants, exp.reward, exp.beam, exp.prompts, seeds)
    best = variants[-1][1]
    store = TrajectoryStore(exp.output_dir / "beam_trajectories.jsonl", exp.vocab)
    store.extend(
        label_trajectories(
            exp.reward,
            [blockwise_beam_search(exp.base, best, p, exp.beam) for p in exp.prompts],
        )
    )
    report = emit_report(rows, _report_path(exp, "beam", seeds, "csv"), "csv", ComparisonRow)
    return [str(report), str(store.path)]


def cmd_sweep(args: argparse.Namespace, exp: Experiment) -> list[str]:
    value = exp.value_or_train(args.value, exp.output_dir / "sweep_train")
    spec = exp.config.sweep
    rows = run_beta_sweep(
        exp.base,
        value,
        exp.reward,
        spec,
        exp.prompts,
        exp.config.guidance,
        exp.max_length,
        exp.weights,
        exp.config.workers,
    )
    kind = f"sweep-{spec.metric_estimator}-{spec.mode}"
    path = _report_path(exp, kind, spec.seeds, args.format)
    return [str(emit_report(rows, path, args.format, SweepRow))]


def cmd_ablate(args: argparse.Namespace, exp: Experiment) -> list[str]:
    spec = exp.config.ablation
    rows = run_ablation(
        spec.axis,
        spec.grid,
        exp.config.ivr,
        exp.beam,
        exp.base,
        exp.reward,
        exp.initial_value(),
        exp.prompts,
        spec.seeds,
        exp.max_length,
        exp.output_dir / "ablation_runs",
        exp.config.workers,
    )
    path = _report_path(exp, f"ablate-{spec.axis}", spec.seeds, args.format)
    return [str(emit_report(rows, path, args.format, AblationRow))]


def cmd_oracle(args: argparse.Namespace, exp: Experiment) -> list[str]:
    spec = exp.config.oracle
    mdp = EnumerableMdp(
        exp.base,
        exp.reward,
        exp.prompts,
        exp.max_length,
        exp.weights,
        temperature=exp.config.guidance.temperature,
    )
    solution = solve_fixed_point(mdp, spec.beta, spec.tol, spec.max_iters)
    solution_path = exp.output_dir / "oracle_solution.json"
    summary_path = exp.output_dir / "oracle_summary.json"
    base = base_step_policy(mdp)
    summary: dict[str, Any] = {
        "beta": spec.beta,
        "converged": solution.converged,
        "residual": solution.residual,
        "iterations_used": solution.iterations_used,
        "states": len(mdp.states),
        "optimal_value": exact_policy_value(mdp, solution),
        "base_value": exact_policy_value(mdp, base),
    }
    if solution.converged:
        summary["base_gap"] = optimality_gap(mdp, solution, base)
        kl = exact_kl(mdp, solution, base)
        summary["kl_total"] = kl.total
        summary["kl_per_token"] = kl.per_token
    try:
        exp.output_dir.mkdir(parents=True, exist_ok=True)
        solution_path.write_text(solution.to_json(), encoding="utf-8")
        summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write oracle outputs in {exp.output_dir}: {exc}") from exc
    return [str(solution_path), str(summary_path)]


def cmd_speed(args: argparse.Namespace, exp: Experiment) -> list[str]:
    value = load_value(args.value) if args.value else exp.initial_value()
    spec = exp.config.speed
    rows = measure_block_speed(
        exp.base,
        value,
        exp.config.guidance,
        spec.block_sizes,
        exp.prompts,
        spec.seeds,
        exp.max_length,
    )
    path = _report_path(exp, "speed", spec.seeds, args.format)
    return [str(emit_report(rows, path, args.format, SpeedRow))]


def cmd_transfer(args: argparse.Namespace, exp: Experiment) -> list[str]:
    if exp.config.transfer_policy is None:
        raise ConfigError("transfer_policy", "transfer needs a second base policy")
    base_b = build_policy(exp.config.transfer_policy, exp.vocab)
    value, _ = exp.train(exp.output_dir / "transfer_train")
    seeds = exp.config.sweep.seeds
    rows = run_value_transfer(value, exp.base, base_b, exp.reward, exp.beam, exp.prompts, seeds)
    path = _report_path(exp, "transfer", seeds, args.format)
    return [str(emit_report(rows, path, args.format, TransferRow))]


def cmd_validate_config(args: argparse.Namespace, exp: Experiment) -> list[str]:
    print(f"config OK: task {exp.config.task.name!r}, {len(exp.prompts)} prompts")
    return []


def cmd_serve(args: argparse.Namespace, exp: Experiment) -> list[str]:
    import uvicorn

    from app.main import create_app

    host = args.host or settings.STUB_HOST
    port = args.port or settings.STUB_PORT
    uvicorn.run(create_app(exp.base), host=host, port=port, log_config=None)
    return []


COMMANDS: dict[str, Callable[[argparse.Namespace, Experiment], list[str]]] = {
    "train": cmd_train,
    "sample": cmd_sample,
    "beam": cmd_beam,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "oracle": cmd_oracle,
    "speed": cmd_speed,
    "transfer": cmd_transfer,
    "validate-config": cmd_validate_config,
    "serve": cmd_serve,
}


def _validation_message(exc: ValidationError) -> str:
    lines = []
    for error in exc.errors():
        key = ".".join(str(part) for part in error["loc"]) or "config"
        lines.append(f"{key}: {error['msg']}")
    return "; ".join(lines)


def _write_manifest(exp_dir: Path, manifest: CommandManifest) -> None:
    path = exp_dir / f"{manifest.command}_manifest.json"
    try:
        exp_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, stream=sys.stderr)
    started = time.perf_counter()

    manifest = CommandManifest(command=args.command, argv=argv, config={}, status="error")
    output_dir = Path(args.output_dir or settings.IVR_OUTPUT_DIR)
    code = EXIT_INTERNAL_ERROR
    try:
        config = resolve_config(args)
        manifest.config = config.model_dump(mode="json")
        output_dir = Path(config.output_dir or settings.IVR_OUTPUT_DIR)
        manifest.outputs = COMMANDS[args.command](args, Experiment(config, output_dir))
        manifest.status = "ok"
        code = EXIT_OK
    except ValidationError as exc:
        manifest.error = _validation_message(exc)
        print(f"error: {manifest.error}", file=sys.stderr)
        code = EXIT_USER_ERROR
    except UserError as exc:
        manifest.error = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USER_ERROR
    except IvrError as exc:
        manifest.error = str(exc)
        logger.error(f"{args.command} failed: {exc}", extra={"error": type(exc).__name__})
        print(f"internal error: {exc}", file=sys.stderr)
    except Exception as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        logger.exception(f"{args.command} crashed", extra={"error": type(exc).__name__})
        print(f"internal error: {exc}", file=sys.stderr)
    finally:
        manifest.duration_ms = round((time.perf_counter() - started) * 1000, 2)
        try:
            _write_manifest(output_dir, manifest)
        except IoFailure as exc:
            logger.error(str(exc), extra={"error": type(exc).__name__})
            print(f"internal error: {exc}", file=sys.stderr)
            code = EXIT_INTERNAL_ERROR

    if code == EXIT_OK:
        logger.info(
            f"{args.command} finished",
            extra={
                "operation": args.command,
                "count": len(manifest.outputs),
                "duration_ms": manifest.duration_ms,
            },
        )
    return code


def run() -> None:
    sys.exit(main())

"""Tests for the ivr command-line entry point"""

import json
from pathlib import Path

import pytest
import yaml

from app import cli
from app.schemas.config import ExperimentConfig
from app.services.eval_report import report_filename
from app.services.tasks import TOY_CORPUS, toy_experiment

REPO_ROOT = Path(__file__).resolve().parent.parent

SMALL_CONFIG = {
    "task": {
        "name": "small",
        "vocabulary": {"vocab_size": 6, "eos": 0},
        "max_length": 3,
        "prompts": [[1], [2]],
    },
    "policy": {"kind": "ngram", "order": 2, "alpha": 0.5, "corpus": TOY_CORPUS},
    "reward": {"target": [4], "length_penalty": 0.0},
    "ivr": {"K": 2, "iterations": 1, "train": {"epochs": 1}},
    "guidance": {"k": 6, "block_size": 1},
    "beam": {"beam_width": 2, "block_size": 1},
    "sweep": {"beta_grid": [0.0, 1.0], "seeds": [0, 1]},
    "ablation": {"grid": [1], "seeds": [0]},
    "speed": {"block_sizes": [1, 3], "seeds": [0]},
}


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    """Keep main() from attaching a handler to the captured stderr."""
    monkeypatch.setattr(cli, "setup_logging", lambda *args, **kwargs: None)


@pytest.fixture(autouse=True)
def default_output_dir(monkeypatch, tmp_path):
    monkeypatch.setattr(cli.settings, "IVR_OUTPUT_DIR", str(tmp_path / "default_out"))


@pytest.fixture
def small_config(tmp_path) -> str:
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL_CONFIG), encoding="utf-8")
    return str(path)


def _manifest(out: Path, command: str) -> dict:
    return json.loads((out / f"{command}_manifest.json").read_text())


class TestConfigResolution:
    """Test config files and flag overrides"""

    def test_toy_json_matches_builtin(self):
        raw = json.loads((REPO_ROOT / "configs" / "toy.json").read_text())
        loaded = ExperimentConfig.model_validate(raw)
        assert loaded.model_dump() == toy_experiment().model_dump()

    def test_flags_override_config(self, small_config, tmp_path):
        args = cli.build_parser().parse_args(
            ["train", "--config", small_config, "--iterations", "3", "--seed", "7", "--K", "5"]
        )
        config = cli.resolve_config(args)
        assert config.ivr.iterations == 3
        assert config.ivr.K == 5
        assert config.seed == 7
        assert config.ivr.seed == 7
        assert config.task.name == "small"

    def test_sample_beta_overrides_guidance_only(self, small_config):
        args = cli.build_parser().parse_args(["sample", "--config", small_config, "--beta", "3"])
        config = cli.resolve_config(args)
        assert config.guidance.beta == 3.0
        assert config.oracle.beta == 1.0


class TestCommands:
    """Run subcommands end to end on a small task"""

    def test_validate_config_default(self, tmp_path, capsys):
        code = cli.main(["validate-config", "--output-dir", str(tmp_path)])
        assert code == cli.EXIT_OK
        assert "config OK: task 'toy', 8 prompts" in capsys.readouterr().out
        manifest = _manifest(tmp_path, "validate-config")
        assert manifest["status"] == "ok"
        assert manifest["outputs"] == []

    def test_train(self, small_config, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["train", "--config", small_config, "--output-dir", str(out)])
        assert code == cli.EXIT_OK
        assert (out / "run_manifest.json").exists()
        manifest = _manifest(out, "train")
        assert manifest["command"] == "train"
        assert manifest["config"]["task"]["name"] == "small"
        assert all(Path(p).exists() for p in manifest["outputs"])

    def test_oracle(self, small_config, tmp_path):
        code = cli.main(["oracle", "--config", small_config, "--output-dir", str(tmp_path)])
        assert code == cli.EXIT_OK
        summary = json.loads((tmp_path / "oracle_summary.json").read_text())
        assert summary["converged"] is True
        assert summary["optimal_value"] >= summary["base_value"]
        assert summary["base_gap"] == pytest.approx(
            summary["optimal_value"] - summary["base_value"]
        )
        assert (tmp_path / "oracle_solution.json").exists()

    def test_sweep_trains_value_when_none_given(self, small_config, tmp_path):
        code = cli.main(
            ["sweep", "--config", small_config, "--output-dir", str(tmp_path), "--format", "json"]
        )
        assert code == cli.EXIT_OK
        report = tmp_path / report_filename("sweep-exact-tokenwise", "small", [0, 1], "json")
        rows = json.loads(report.read_text())
        assert [r["beta"] for r in rows] == [0.0, 1.0]
        assert (tmp_path / "sweep_train" / "run_manifest.json").exists()

    def test_speed(self, small_config, tmp_path):
        code = cli.main(["speed", "--config", small_config, "--output-dir", str(tmp_path)])
        assert code == cli.EXIT_OK
        report = tmp_path / report_filename("speed", "small", [0], "csv")
        lines = report.read_text().splitlines()
        assert lines[0] == "block_size,relative_time,value_evals_per_token,wall_clock_per_token"
        assert len(lines) == 3

    def test_sample_base(self, small_config, tmp_path):
        code = cli.main(
            [
                "sample",
                "--config",
                small_config,
                "--output-dir",
                str(tmp_path),
                "--mode",
                "base",
                "--samples",
                "2",
            ]
        )
        assert code == cli.EXIT_OK
        lines = (tmp_path / "samples_base.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert all(json.loads(line)["reward"] is not None for line in lines)


class TestExitCodes:
    """User errors exit 1; internal errors exit 2; both leave an error manifest"""

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**SMALL_CONFIG, "colour": "blue"}))
        code = cli.main(["train", "--config", str(path), "--output-dir", str(tmp_path)])
        assert code == cli.EXIT_USER_ERROR
        assert "colour" in capsys.readouterr().err
        manifest = _manifest(tmp_path, "train")
        assert manifest["status"] == "error"
        assert "colour" in manifest["error"]
        assert manifest["config"] == {}
        assert manifest["outputs"] == []

    def test_missing_config_file(self, tmp_path):
        code = cli.main(["train", "--config", str(tmp_path / "nope.yaml")])
        assert code == cli.EXIT_USER_ERROR
        manifest = _manifest(tmp_path / "default_out", "train")
        assert manifest["status"] == "error"
        assert "nope.yaml" in manifest["error"]

    def test_unparseable_config(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert cli.main(["validate-config", "--config", str(path)]) == cli.EXIT_USER_ERROR

    def test_invalid_k_reports_key(self, small_config, tmp_path, capsys):
        code = cli.main(["train", "--config", small_config, "--K", "0"])
        assert code == cli.EXIT_USER_ERROR
        assert "ivr.K" in capsys.readouterr().err

    def test_validate_config_rejects_zero_k(self, tmp_path, capsys):
        path = tmp_path / "k0.json"
        path.write_text(json.dumps({**SMALL_CONFIG, "ivr": {"K": 0}}))
        code = cli.main(["validate-config", "--config", str(path)])
        assert code == cli.EXIT_USER_ERROR
        assert "K must be ≥ 1" in capsys.readouterr().err

    def test_transfer_without_second_policy(self, small_config, tmp_path):
        code = cli.main(["transfer", "--config", small_config, "--output-dir", str(tmp_path)])
        assert code == cli.EXIT_USER_ERROR
        manifest = _manifest(tmp_path, "transfer")
        assert manifest["status"] == "error"
        assert manifest["config"]["task"]["name"] == "small"

    def test_internal_error_is_recorded(self, small_config, tmp_path, monkeypatch):
        def explode(args, exp):
            raise RuntimeError("oracle table corrupted")

        monkeypatch.setitem(cli.COMMANDS, "oracle", explode)
        code = cli.main(["oracle", "--config", small_config, "--output-dir", str(tmp_path)])
        assert code == cli.EXIT_INTERNAL_ERROR
        manifest = _manifest(tmp_path, "oracle")
        assert manifest["status"] == "error"
        assert manifest["error"] == "RuntimeError: oracle table corrupted"
        assert manifest["duration_ms"] >= 0

    def test_malformed_beam_variant(self, small_config, tmp_path):
        code = cli.main(
            [
                "beam",
                "--config",
                small_config,
                "--output-dir",
                str(tmp_path),
                "--variant",
                "no-separator",
            ]
        )
        assert code == cli.EXIT_USER_ERROR

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["frobnicate"],
            ["sample", "--mode", "greedy"],
        ],
    )
    def test_usage_errors_exit_1(self, argv):
        with pytest.raises(SystemExit) as exc_info:
            cli.main(argv)
        assert exc_info.value.code == cli.EXIT_USER_ERROR

"""Tests for experiment runners and report emitters"""

import csv
import json
import time

import pytest

from app.schemas.config import BeamConfig, GuidanceConfig, IvrConfig, SweepSpec, TrainConfig
from app.schemas.mdp import Vocabulary
from app.schemas.reports import ComparisonRow, SweepRow
from app.services.eval_report import (
    emit_report,
    measure_block_speed,
    report_filename,
    run_ablation,
    run_beam_comparison,
    run_beta_sweep,
    run_value_transfer,
)
from app.services.oracle import EnumerableMdp, base_step_policy, exact_policy_value
from app.services.policy import TabularPolicy, fit_ngram
from app.services.tasks import TOY_CORPUS_B
from app.services.value import ConstantValue, RewardPrefixValue, TabularValue, ValueFunction


class HitValue(ValueFunction):
    def __init__(self):
        super().__init__((0.0, 1.0))

    def evaluate(self, state):
        return 1.0 if 4 in state.generated else 0.0


class SlowValue(ValueFunction):
    """Constant value whose every evaluation costs a fixed sleep."""

    def __init__(self):
        super().__init__((0.0, 1.0))

    def evaluate(self, state):
        time.sleep(2e-4)
        return 0.0


GUIDANCE = GuidanceConfig(beta=1.0, k=3, block_size=1, temperature=1.0)


class TestBetaSweep:
    """Test reward/KL sweeps"""

    def test_exact_sweep(self, tiny_policy, tiny_reward):
        spec = SweepSpec(beta_grid=[0.0, 1.0, 4.0], metric_estimator="exact")
        value = RewardPrefixValue(tiny_reward)
        rows = run_beta_sweep(tiny_policy, value, tiny_reward, spec, [[1]], GUIDANCE, 3)

        assert [r.beta for r in rows] == [0.0, 1.0, 4.0]
        assert rows[0].mean_token_kl == pytest.approx(0.0)
        assert all(r.mean_token_kl > 0 for r in rows[1:])
        assert all(r.std_reward == 0.0 for r in rows)
        m = EnumerableMdp(tiny_policy, tiny_reward, [[1]], 3)
        assert rows[0].mean_reward == pytest.approx(exact_policy_value(m, base_step_policy(m)))
        assert rows[-1].mean_reward > rows[0].mean_reward

    def test_monte_carlo_sweep(self, toy_policy, toy_reward, toy_prompts):
        spec = SweepSpec(
            beta_grid=[0.0, 2.0],
            samples_per_point=4,
            seeds=[0, 1],
            metric_estimator="monte_carlo",
            mode="blockwise",
        )
        guidance = GuidanceConfig(k=6, block_size=2)
        rows = run_beta_sweep(
            toy_policy, HitValue(), toy_reward, spec, toy_prompts[:3], guidance, 5, workers=2
        )
        again = run_beta_sweep(
            toy_policy, HitValue(), toy_reward, spec, toy_prompts[:3], guidance, 5, workers=1
        )
        assert len(rows) == 2
        assert rows[0].mean_token_kl == pytest.approx(0.0)
        assert rows[1].mean_token_kl > 0
        assert all(r.std_reward >= 0 for r in rows)
        assert [r.mean_reward for r in rows] == [r.mean_reward for r in again]


class TestBlockSpeed:
    """Value evaluations per token scale as (k + 1) / block_size"""

    def test_evaluations_per_token(self):
        vocab = Vocabulary(vocab_size=24, eos=None)
        base = TabularPolicy(vocab)
        rows = measure_block_speed(
            base,
            ConstantValue(0.0),
            GuidanceConfig(beta=1.0, k=20, temperature=1.0),
            [1, 2, 4],
            [[1], [2]],
            [0, 1],
            8,
        )
        evals = {r.block_size: r.value_evals_per_token for r in rows}
        assert evals == {1: pytest.approx(21.0), 2: pytest.approx(10.5), 4: pytest.approx(5.25)}
        assert rows[-1].relative_time == pytest.approx(1.0)
        assert all(r.wall_clock_per_token > 0 for r in rows)

    def test_wall_clock_falls_with_block_size(self):
        vocab = Vocabulary(vocab_size=24, eos=None)
        rows = measure_block_speed(
            TabularPolicy(vocab),
            SlowValue(),
            GuidanceConfig(beta=1.0, k=20, temperature=1.0),
            [1, 2, 4],
            [[1], [2]],
            [0, 1],
            8,
        )
        per_token = [r.wall_clock_per_token for r in rows]
        assert per_token[0] > per_token[1] > per_token[2]
        assert rows[0].relative_time > rows[1].relative_time > 1.0


class TestComparisons:
    """Test beam comparisons, ablations and transfer"""

    BEAM = BeamConfig(beam_width=2, block_size=2, max_length=5)

    def test_beam_comparison_rows(self, toy_policy, toy_reward, toy_prompts):
        rows = run_beam_comparison(
            toy_policy, [("hit", HitValue())], toy_reward, self.BEAM, toy_prompts[:2], [0, 1]
        )
        assert [r.variant for r in rows] == ["base", "hit"]
        assert all(r.samples == 4 for r in rows)

    def test_beam_samples_per_prompt(self, toy_policy, toy_reward, toy_prompts):
        beam = self.BEAM.model_copy(update={"samples_per_prompt": 3})
        rows = run_beam_comparison(
            toy_policy, [("hit", HitValue())], toy_reward, beam, toy_prompts[:2], [0, 1]
        )
        assert all(r.samples == 12 for r in rows)

    def test_beam_comparison_needs_variants(self, toy_policy, toy_reward, toy_prompts):
        from app.core.errors import InvariantViolation

        with pytest.raises(InvariantViolation):
            run_beam_comparison(toy_policy, [], toy_reward, self.BEAM, toy_prompts, [0])

    def test_ablation_runs_every_grid_point(self, toy_policy, toy_reward, toy_prompts, tmp_path):
        ivr = IvrConfig(K=1, iterations=1, train=TrainConfig(epochs=1))
        rows = run_ablation(
            "K",
            [1, 2],
            ivr,
            self.BEAM,
            toy_policy,
            toy_reward,
            TabularValue(toy_reward.reward_range),
            toy_prompts[:2],
            [0],
            5,
            tmp_path,
        )
        assert [(r.axis, r.value) for r in rows] == [("K", 1), ("K", 2)]
        assert (tmp_path / "ablate_K_2" / "seed_0" / "run_manifest.json").exists()

    def test_value_transfer_rows(self, toy_policy, toy_reward, toy_prompts, toy_vocab):
        other = fit_ngram(TOY_CORPUS_B, 2, 0.5, toy_vocab)
        rows = run_value_transfer(
            HitValue(), toy_policy, other, toy_reward, self.BEAM, toy_prompts[:2], [0]
        )
        assert [r.variant for r in rows] == ["A-unguided", "A-guided", "B-unguided", "B-guided"]


class TestEmitters:
    """Test CSV/JSON report files"""

    ROWS = [
        SweepRow(
            beta=1.0,
            mean_reward=0.123456789,
            std_reward=0.0,
            mean_token_kl=1e-7 / 3,
            wall_clock_per_token=2.5e-5,
        )
    ]

    def test_csv(self, tmp_path):
        path = emit_report(self.ROWS, tmp_path / "out" / "s.csv", "csv", SweepRow)
        with path.open() as fh:
            records = list(csv.reader(fh))
        assert records[0] == [
            "beta",
            "mean_reward",
            "std_reward",
            "mean_token_kl",
            "wall_clock_per_token",
        ]
        assert records[1] == ["1", "0.123457", "0", "3.33333e-08", "2.5e-05"]

    def test_json(self, tmp_path):
        path = emit_report(self.ROWS, tmp_path / "s.json", "json", SweepRow)
        payload = json.loads(path.read_text())
        assert payload[0]["mean_reward"] == 0.123457
        assert list(payload[0]) == list(SweepRow.model_fields)

    def test_empty_rows_still_have_header(self, tmp_path):
        path = emit_report([], tmp_path / "c.csv", "csv", ComparisonRow)
        assert path.read_text().strip() == "variant,mean_reward,std_reward,samples"

    def test_report_filename(self):
        assert report_filename("sweep", "toy", [0, 1, 2, 3, 4], "csv") == "sweep_toy_seeds0-4.csv"

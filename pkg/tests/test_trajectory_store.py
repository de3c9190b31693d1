"""Tests for JSONL trajectory persistence"""

import json

import pytest

from app.core.errors import InvariantViolation
from app.schemas.mdp import Trajectory
from app.services.trajectory_store import TrajectoryStore


def _trajectory(seed: int, reward: float | None = None) -> Trajectory:
    return Trajectory(
        prompt=(2,), completion=(1, 4, 0), reward=reward, policy_tag="base", iteration=1, seed=seed
    )


class TestTrajectoryStore:
    """Test append, read-back and record layout"""

    def test_append_and_read_back_in_order(self, tmp_path):
        store = TrajectoryStore(tmp_path / "runs" / "t.jsonl")
        store.append(_trajectory(0, 0.5))
        assert store.extend([_trajectory(1), _trajectory(2, 1.0)]) == 2

        records = store.read_all()
        assert [t.seed for t in records] == [0, 1, 2]
        assert records[1].reward is None
        assert len(store) == 3

    def test_record_field_order(self, tmp_path):
        store = TrajectoryStore(tmp_path / "t.jsonl")
        store.append(_trajectory(7, 0.85))
        line = (tmp_path / "t.jsonl").read_text().splitlines()[0]
        assert list(json.loads(line)) == [
            "prompt",
            "completion",
            "reward",
            "policy_tag",
            "iteration",
            "seed",
        ]

    def test_missing_file_reads_empty(self, tmp_path):
        assert TrajectoryStore(tmp_path / "absent.jsonl").read_all() == []

    def test_partial_trailing_line_is_ignored(self, tmp_path):
        path = tmp_path / "t.jsonl"
        store = TrajectoryStore(path)
        store.append(_trajectory(0))
        with path.open("a") as f:
            f.write('{"prompt": [2], "completion"')
        assert [t.seed for t in store] == [0]

    def test_malformed_line_raises(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"prompt": [2]}\n')
        with pytest.raises(InvariantViolation, match="malformed record"):
            TrajectoryStore(path).read_all()

    def test_vocabulary_checked_on_append(self, tmp_path, toy_vocab):
        store = TrajectoryStore(tmp_path / "t.jsonl", toy_vocab)
        bad = Trajectory(prompt=(2,), completion=(0, 1), policy_tag="base")
        with pytest.raises(InvariantViolation):
            store.append(bad)
        assert not (tmp_path / "t.jsonl").exists()

    def test_vocabulary_checked_on_read(self, tmp_path, toy_vocab):
        path = tmp_path / "t.jsonl"
        TrajectoryStore(path).append(
            Trajectory(prompt=(2,), completion=(9, 0), reward=0.0, policy_tag="base")
        )
        assert len(TrajectoryStore(path)) == 1
        with pytest.raises(InvariantViolation, match="outside vocabulary"):
            TrajectoryStore(path, toy_vocab).read_all()

    def test_thousand_records_read_back_exactly(self, tmp_path, toy_vocab):
        store = TrajectoryStore(tmp_path / "big.jsonl", toy_vocab)
        written = [
            Trajectory(
                prompt=(1 + i % 5,),
                completion=tuple(1 + (i + j) % 5 for j in range(i % 4)) + (0,),
                reward=3.1415926535 if i % 2 else -0.1 * (i % 7),
                policy_tag="base" if i < 500 else "blockwise-b2",
                iteration=i // 250,
                seed=i,
            )
            for i in range(1000)
        ]
        assert store.extend(written) == 1000

        read = store.read_all()
        assert read == written
        assert all(t.reward == 3.1415926535 for t in read[1::2])

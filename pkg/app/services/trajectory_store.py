"""Append-only JSONL persistence for trajectories."""

import json
import logging
import os
import threading
from collections.abc import Iterable, Iterator
from pathlib import Path

from pydantic import ValidationError

from app.core.errors import InvariantViolation, IoFailure
from app.schemas.mdp import Trajectory, Vocabulary
from app.services.mdp import validate_trajectory

logger = logging.getLogger(__name__)


class TrajectoryStore:
    """
    One trajectory per line, fields in the order
    prompt, completion, reward, policy_tag, iteration, seed.

    A store has one writer; readers only see complete lines, so a concurrent read returns a
    consistent prefix of what has been appended.
    """

    def __init__(self, path: str | Path, vocab: Vocabulary | None = None):
        self.path = Path(path)
        self.vocab = vocab
        self._lock = threading.Lock()

    def append(self, trajectory: Trajectory) -> None:
        self.extend([trajectory])

    def extend(self, trajectories: Iterable[Trajectory]) -> int:
        """Durably append trajectories in order; returns how many were written."""
        batch = list(trajectories)
        if self.vocab is not None:
            for trajectory in batch:
                validate_trajectory(trajectory, self.vocab)
        lines = "".join(json.dumps(t.model_dump(mode="json")) + "\n" for t in batch)

        with self._lock:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(lines)
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as exc:
                raise IoFailure(f"cannot append to {self.path}: {exc}") from exc

        logger.debug(
            f"Appended {len(batch)} trajectories to {self.path}",
            extra={"operation": "append_trajectories", "count": len(batch)},
        )
        return len(batch)

    def __iter__(self) -> Iterator[Trajectory]:
        try:
            text = self.path.read_text(encoding="utf-8") if self.path.exists() else ""
        except OSError as exc:
            raise IoFailure(f"cannot read {self.path}: {exc}") from exc

        complete, _, _partial = text.rpartition("\n")
        for lineno, line in enumerate(complete.split("\n") if complete else [], start=1):
            if not line.strip():
                continue
            try:
                trajectory = Trajectory.model_validate(json.loads(line))
            except (ValidationError, json.JSONDecodeError) as exc:
                raise InvariantViolation(f"{self.path}:{lineno}: malformed record: {exc}") from exc
            if self.vocab is not None:
                validate_trajectory(trajectory, self.vocab)
            yield trajectory

    def read_all(self) -> list[Trajectory]:
        return list(self)

    def __len__(self) -> int:
        return sum(1 for _ in self)

"""
Value functions V_θ(x, y_{<=t}) and their Monte-Carlo L2 regression.

Checkpoint layout (JSON, version "1"):
    tabular:  params = {"default_value": float | null,
                        "entries": {state_key: [sum_of_targets, count]}}
    mlp:      params = {"vocab_size": int, "max_length": int,
                        "layers": [{"shape": [in, out], "weights": [[...]], "bias": [...]}]}
              the last layer is the linear scalar head; every earlier layer uses tanh.
    constant: params = {"value": float}
"""

import copy
import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from app.core.constants import CHECKPOINT_VERSION
from app.core.errors import (
    FormatMismatch,
    InvariantViolation,
    IoFailure,
    NonfiniteLoss,
    UnlabeledTrajectory,
)
from app.schemas.config import TrainConfig
from app.schemas.mdp import State, Trajectory
from app.services.distribution import FloatArray
from app.services.reward import RewardModel

logger = logging.getLogger(__name__)


class ValueFunction(ABC):
    """State -> expected terminal reward; evaluation is pure for fixed parameters."""

    kind: str = "abstract"

    def __init__(self, reward_range: tuple[float, float]):
        self.reward_range = (float(reward_range[0]), float(reward_range[1]))

    @abstractmethod
    def evaluate(self, state: State) -> float: ...

    def evaluate_batch(self, states: Sequence[State]) -> FloatArray:
        return np.array([self.evaluate(s) for s in states], dtype=np.float64)


class ConstantValue(ValueFunction):
    kind = "constant"

    def __init__(self, value: float = 0.0, reward_range: tuple[float, float] | None = None):
        super().__init__(reward_range or (value, value))
        self.value = float(value)

    def evaluate(self, state: State) -> float:
        return self.value


class RewardPrefixValue(ValueFunction):
    """Scores a partial sequence with the reward model; prompt-only states get the midpoint."""

    kind = "reward-prefix"

    def __init__(self, reward: RewardModel):
        super().__init__(reward.reward_range)
        self.reward = reward

    def evaluate(self, state: State) -> float:
        if not state.generated:
            return 0.5 * (self.reward_range[0] + self.reward_range[1])
        return self.reward.score(state.prompt, state.generated)


class TabularValue(ValueFunction):
    """
    Per-state running sums of targets.

    Unseen states evaluate to `default_value` when one is given, otherwise to the mean of
    every target in the table (the range midpoint while the table is empty). Entries are
    not mutated after construction; training returns a new table.
    """

    kind = "tabular"

    def __init__(
        self,
        reward_range: tuple[float, float],
        entries: dict[str, tuple[float, int]] | None = None,
        default_value: float | None = None,
    ):
        super().__init__(reward_range)
        self.entries: dict[str, tuple[float, int]] = dict(entries or {})
        self.default_value = None if default_value is None else float(default_value)
        total = sum(s for s, _ in self.entries.values())
        count = sum(c for _, c in self.entries.values())
        if self.default_value is not None:
            self.fallback = self.default_value
        elif count > 0:
            self.fallback = total / count
        else:
            self.fallback = 0.5 * (self.reward_range[0] + self.reward_range[1])

    def evaluate(self, state: State) -> float:
        entry = self.entries.get(state.key)
        if entry is None or entry[1] == 0:
            return self.fallback
        return entry[0] / entry[1]


class MlpValue(ValueFunction):
    """
    tanh MLP over a fixed feature map with a linear scalar head.

    Features: token counts of the prompt (vocab_size), token counts of the generated
    tokens (vocab_size), and len(generated) / max_length.
    """

    kind = "mlp"

    def __init__(
        self,
        vocab_size: int,
        max_length: int,
        reward_range: tuple[float, float],
        hidden_sizes: Sequence[int] = (16,),
        seed: int = 0,
        layers: list[tuple[FloatArray, FloatArray]] | None = None,
    ):
        super().__init__(reward_range)
        self.vocab_size = vocab_size
        self.max_length = max_length
        if layers is None:
            rng = np.random.default_rng(seed)
            sizes = [self.feature_dim, *hidden_sizes, 1]
            layers = [
                (rng.uniform(-0.1, 0.1, size=(n_in, n_out)), np.zeros(n_out))
                for n_in, n_out in zip(sizes, sizes[1:])
            ]
        self.layers = [
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in layers
        ]
        if self.layers[0][0].shape[0] != self.feature_dim or self.layers[-1][0].shape[1] != 1:
            raise InvariantViolation("mlp layer shapes do not fit the feature map and scalar head")

    @property
    def feature_dim(self) -> int:
        return 2 * self.vocab_size + 1

    def features(self, states: Sequence[State]) -> FloatArray:
        v = self.vocab_size
        x = np.zeros((len(states), self.feature_dim), dtype=np.float64)
        for row, state in enumerate(states):
            np.add.at(x[row], np.asarray(state.prompt, dtype=np.int64), 1.0)
            np.add.at(x[row], v + np.asarray(state.generated, dtype=np.int64), 1.0)
            x[row, 2 * v] = len(state.generated) / self.max_length
        return x

    def forward(self, x: FloatArray) -> tuple[FloatArray, list[FloatArray]]:
        """Outputs of shape (n,) plus the input of every layer, for backprop."""
        inputs = []
        h = x
        for i, (w, b) in enumerate(self.layers):
            inputs.append(h)
            h = h @ w + b
            if i < len(self.layers) - 1:
                h = np.tanh(h)
        return h[:, 0], inputs

    def backward(
        self, inputs: list[FloatArray], grad_out: FloatArray
    ) -> list[tuple[FloatArray, FloatArray]]:
        """
        Parameter gradients given dLoss/dOutput per row.

        For a tanh layer h' = tanh(h W + b) the upstream gradient is multiplied by
        (1 - h'^2) before flowing into W (via h^T) and b (row sum).
        """
        grads: list[tuple[FloatArray, FloatArray]] = []
        delta = grad_out[:, None]
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            h_in = inputs[i]
            grads.append((h_in.T @ delta, delta.sum(axis=0)))
            if i > 0:
                # inputs[i] is the tanh output of layer i - 1
                delta = (delta @ w.T) * (1.0 - h_in**2)
        grads.reverse()
        return grads

    def evaluate(self, state: State) -> float:
        return float(self.forward(self.features([state]))[0][0])

    def evaluate_batch(self, states: Sequence[State]) -> FloatArray:
        if not states:
            return np.zeros(0, dtype=np.float64)
        return self.forward(self.features(states))[0]


class CountingValue(ValueFunction):
    """Delegates to `inner` and counts single evaluations (thread-safe)."""

    def __init__(self, inner: ValueFunction):
        super().__init__(inner.reward_range)
        self.inner = inner
        self.kind = inner.kind
        self.count = 0
        self._lock = threading.Lock()

    def evaluate(self, state: State) -> float:
        with self._lock:
            self.count += 1
        return self.inner.evaluate(state)

    def evaluate_batch(self, states: Sequence[State]) -> FloatArray:
        with self._lock:
            self.count += len(states)
        return self.inner.evaluate_batch(states)


@dataclass(frozen=True)
class RegressionSample:
    state: State
    target: float


def build_regression_set(trajectories: Sequence[Trajectory]) -> list[RegressionSample]:
    """One sample per prefix y_{<=t}, t = 1..|y|, all targeting the trajectory's reward."""
    samples: list[RegressionSample] = []
    for t in trajectories:
        if t.reward is None:
            raise UnlabeledTrajectory(
                f"trajectory with seed {t.seed} (iteration {t.iteration}) has no reward"
            )
        for end in range(1, len(t.completion) + 1):
            samples.append(
                RegressionSample(State(prompt=t.prompt, generated=t.completion[:end]), t.reward)
            )
    return samples


def _train_tabular(
    value: TabularValue, data: Sequence[RegressionSample], cfg: TrainConfig
) -> tuple[TabularValue, list[float]]:
    sums: dict[str, tuple[float, int]] = {}
    for sample in data:
        total, count = sums.get(sample.state.key, (0.0, 0))
        sums[sample.state.key] = (total + sample.target, count + 1)

    trained = TabularValue(value.reward_range, {**value.entries, **sums}, value.default_value)
    loss = float(np.mean([0.5 * (trained.evaluate(s.state) - s.target) ** 2 for s in data]))
    return trained, [loss] * cfg.epochs


class _AdamW:
    def __init__(self, layers: list[tuple[FloatArray, FloatArray]], cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.weight_decay = cfg.weight_decay
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
        self.t = 0

    def step(
        self,
        layers: list[tuple[FloatArray, FloatArray]],
        grads: list[tuple[FloatArray, FloatArray]],
    ) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, ((w, b), (gw, gb)) in enumerate(zip(layers, grads)):
            for j, (param, grad) in enumerate(((w, gw), (b, gb))):
                m = self.m[i][j]
                v = self.v[i][j]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad**2
                param -= self.lr * self.weight_decay * param
                param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _train_mlp(
    value: MlpValue, data: Sequence[RegressionSample], cfg: TrainConfig
) -> tuple[MlpValue, list[float]]:
    trained = copy.deepcopy(value)
    x = trained.features([s.state for s in data])
    y = np.array([s.target for s in data], dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    adamw = _AdamW(trained.layers, cfg) if cfg.optimizer == "adamw" else None

    loss_trace: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, inputs = trained.forward(x[idx])
            residual = out - y[idx]
            epoch_loss += float(0.5 * np.sum(residual**2))
            grads = trained.backward(inputs, residual / len(idx))
            if adamw is not None:
                adamw.step(trained.layers, grads)
            else:
                for (w, b), (gw, gb) in zip(trained.layers, grads):
                    w -= cfg.learning_rate * gw
                    b -= cfg.learning_rate * gb
        mean_loss = epoch_loss / len(data)
        if not np.isfinite(mean_loss):
            raise NonfiniteLoss(epoch, cfg.learning_rate)
        loss_trace.append(mean_loss)
    return trained, loss_trace


def train_value(
    value: ValueFunction, data: Sequence[RegressionSample], cfg: TrainConfig
) -> tuple[ValueFunction, list[float]]:
    """
    Minimize (1/2) * sum (V(s) - target)^2 over `data`, starting from `value`'s parameters.

    `value` itself is never mutated. Tabular values take the closed-form per-state mean of
    the new data (states absent from `data` keep their previous entry); MLP values run
    cfg.epochs shuffled minibatch passes. The loss trace holds the mean loss per epoch.

    Raises:
        InvariantViolation: If `data` is empty or the parameterization is not trainable.
        NonfiniteLoss: If an epoch's loss is not finite.
    """
    if not data:
        raise InvariantViolation("regression set is empty")
    if isinstance(value, TabularValue):
        trained, trace = _train_tabular(value, data, cfg)
    elif isinstance(value, MlpValue):
        trained, trace = _train_mlp(value, data, cfg)
    else:
        raise InvariantViolation(f"value kind {value.kind!r} is not trainable")

    logger.info(
        f"Trained {value.kind} value on {len(data)} samples",
        extra={"operation": "train_value", "count": len(data), "seed": cfg.seed},
    )
    return trained, trace


def gradient_check(value: MlpValue, sample: RegressionSample, eps: float = 1e-5) -> float:
    """
    Max relative error between analytic and central-difference gradients of
    (1/2) * (V(s) - target)^2 over every parameter.
    """
    x = value.features([sample.state])

    def loss() -> float:
        return float(0.5 * (value.forward(x)[0][0] - sample.target) ** 2)

    out, inputs = value.forward(x)
    analytic = value.backward(inputs, out - sample.target)

    worst = 0.0
    for (w, b), (gw, gb) in zip(value.layers, analytic):
        for param, grad in ((w, gw), (b, gb)):
            for idx in np.ndindex(param.shape):
                original = param[idx]
                param[idx] = original + eps
                plus = loss()
                param[idx] = original - eps
                minus = loss()
                param[idx] = original
                numeric = (plus - minus) / (2.0 * eps)
                a = float(grad[idx])
                worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
    return worst


class ValueCheckpoint(BaseModel):
    version: str
    kind: Literal["tabular", "mlp", "constant"]
    reward_range: tuple[float, float]
    params: dict[str, Any]

    model_config = ConfigDict(extra="forbid")


def _to_checkpoint(value: ValueFunction) -> ValueCheckpoint:
    params: dict[str, Any]
    if isinstance(value, TabularValue):
        params = {
            "default_value": value.default_value,
            "entries": {k: [s, c] for k, (s, c) in sorted(value.entries.items())},
        }
    elif isinstance(value, MlpValue):
        params = {
            "vocab_size": value.vocab_size,
            "max_length": value.max_length,
            "layers": [
                {"shape": list(w.shape), "weights": w.tolist(), "bias": b.tolist()}
                for w, b in value.layers
            ],
        }
    elif isinstance(value, ConstantValue):
        params = {"value": value.value}
    else:
        raise InvariantViolation(f"value kind {value.kind!r} has no checkpoint format")
    return ValueCheckpoint(
        version=CHECKPOINT_VERSION,
        kind=value.kind,  # type: ignore[arg-type]
        reward_range=value.reward_range,
        params=params,
    )


def save_value(value: ValueFunction, path: str | Path) -> Path:
    """Write a versioned JSON checkpoint atomically (temp file + rename)."""
    target = Path(path)
    payload = _to_checkpoint(value).model_dump(mode="json")
    tmp = target.with_name(target.name + ".tmp")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)
    except OSError as exc:
        raise IoFailure(f"cannot write value checkpoint {target}: {exc}") from exc
    return target


def load_value(path: str | Path) -> ValueFunction:
    """
    Raises:
        IoFailure: If the file cannot be read or parsed.
        FormatMismatch: If the checkpoint version differs from CHECKPOINT_VERSION.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read value checkpoint {path}: {exc}") from exc

    found = str(raw.get("version")) if isinstance(raw, dict) else "missing"
    if found != CHECKPOINT_VERSION:
        raise FormatMismatch(found, CHECKPOINT_VERSION)
    try:
        ckpt = ValueCheckpoint.model_validate(raw)
    except ValidationError as exc:
        raise InvariantViolation(f"malformed value checkpoint {path}: {exc}") from exc

    try:
        return _from_params(ckpt)
    except KeyError as exc:
        raise InvariantViolation(
            f"{ckpt.kind} value checkpoint {path} is missing parameter {exc}"
        ) from exc


def _from_params(ckpt: ValueCheckpoint) -> ValueFunction:
    p = ckpt.params
    if ckpt.kind == "tabular":
        entries = {k: (float(s), int(c)) for k, (s, c) in p["entries"].items()}
        default = p["default_value"]
        return TabularValue(
            ckpt.reward_range, entries, None if default is None else float(default)
        )
    if ckpt.kind == "mlp":
        layers = []
        for layer in p["layers"]:
            w = np.asarray(layer["weights"], dtype=np.float64).reshape(layer["shape"])
            layers.append((w, np.asarray(layer["bias"], dtype=np.float64)))
        return MlpValue(
            int(p["vocab_size"]), int(p["max_length"]), ckpt.reward_range, layers=layers
        )
    return ConstantValue(float(p["value"]), ckpt.reward_range)

"""
Exact ground truth on enumerable token MDPs.

The full completion tree of every prompt is materialized level by level. Internal
(non-terminal) nodes carry a child index per token; terminal nodes carry their reward.
Policy evaluation is a bottom-up sweep over levels, visitation a top-down one.
"""

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from app.core.config import settings
from app.core.errors import (
    BudgetExceeded,
    InvariantViolation,
    SupportViolation,
    UnconvergedOracle,
)
from app.schemas.mdp import State, Vocabulary
from app.services.distribution import FloatArray, IntArray, NextTokenDistribution, kl_divergence
from app.services.guided_decode import StepPolicy, TemperedBase
from app.services.mdp import extend_state, is_terminal
from app.services.policy import PolicyBackend
from app.services.reward import RewardModel

logger = logging.getLogger(__name__)


class EnumerableMdp:
    def __init__(
        self,
        base: PolicyBackend,
        reward: RewardModel,
        prompts: Sequence[Sequence[int]],
        max_length: int,
        weights: Sequence[float] | None = None,
        temperature: float = 1.0,
        budget: int | None = None,
    ):
        if not base.supports_dense:
            raise InvariantViolation("the oracle needs a base policy with dense support")
        if not prompts:
            raise InvariantViolation("the oracle needs at least one prompt")
        self.base = base
        self.reward = reward
        self.vocab: Vocabulary = base.vocab
        self.max_length = max_length
        self.temperature = temperature
        self.budget = budget or settings.ORACLE_STATE_BUDGET

        needed = self.vocab.vocab_size**max_length * len(prompts)
        if needed > self.budget:
            raise BudgetExceeded(needed, self.budget)

        w = np.full(len(prompts), 1.0 / len(prompts)) if weights is None else np.asarray(weights)
        if w.shape != (len(prompts),) or np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise InvariantViolation("prompt weights must be nonnegative and sum to 1")
        rho: dict[tuple[int, ...], float] = {}
        for prompt, weight in zip(prompts, w):
            key = tuple(int(t) for t in prompt)
            rho[key] = rho.get(key, 0.0) + float(weight)
        self.prompts = list(rho)
        self.rho = np.array([rho[p] for p in self.prompts])
        self._enumerate()

    def _enumerate(self) -> None:
        v = self.vocab.vocab_size
        self.states: list[State] = []
        self.index: dict[str, int] = {}
        self.roots: list[int] = []
        terminal: list[bool] = []
        internal_nodes: list[int] = []
        child_rows: list[list[int]] = []
        levels: list[list[int]] = []

        frontier: list[int] = []
        for prompt in self.prompts:
            state = State(prompt=prompt)
            self.roots.append(len(self.states))
            frontier.append(len(self.states))
            self.index[state.key] = len(self.states)
            self.states.append(state)
            terminal.append(False)

        while frontier:
            levels.append(frontier)
            next_frontier: list[int] = []
            for node in frontier:
                state = self.states[node]
                if is_terminal(state, self.vocab, self.max_length):
                    terminal[node] = True
                    continue
                internal_nodes.append(node)
                row = []
                for a in range(v):
                    child = extend_state(state, a, self.vocab)
                    self.index[child.key] = len(self.states)
                    row.append(len(self.states))
                    next_frontier.append(len(self.states))
                    self.states.append(child)
                    terminal.append(False)
                child_rows.append(row)
            frontier = next_frontier

        self.terminal = np.array(terminal)
        self.internal: IntArray = np.array(internal_nodes, dtype=np.int64)
        self.internal_row = np.full(len(self.states), -1, dtype=np.int64)
        self.internal_row[self.internal] = np.arange(len(self.internal))
        self.children: IntArray = np.array(child_rows, dtype=np.int64).reshape(-1, v)
        self.rewards = np.zeros(len(self.states))
        for node in np.nonzero(self.terminal)[0]:
            s = self.states[node]
            self.rewards[node] = self.reward.score(s.prompt, s.generated)
        # internal rows grouped by depth, deepest first
        self.levels_internal = [
            self.internal_row[[n for n in level if not self.terminal[n]]] for level in levels
        ][::-1]
        rows = [
            self.base.next_distribution(self.states[n], self.temperature).to_dense()
            for n in self.internal
        ]
        self.base_probs = np.stack(rows) if rows else np.zeros((0, v))
        logger.info(
            f"Enumerated {len(self.states)} states ({len(self.internal)} internal)",
            extra={"operation": "enumerate_mdp", "count": len(self.states)},
        )

    def policy_matrix(self, policy: StepPolicy) -> FloatArray:
        """Row per internal node: the distribution `policy` samples from at that state."""
        if len(self.internal) == 0:
            return np.zeros((0, self.vocab.vocab_size))
        return np.stack(
            [policy.step_distribution(self.states[n]).support_dense() for n in self.internal]
        )

    def evaluate(self, pi: FloatArray) -> FloatArray:
        """Expected terminal reward from every node under per-node rows `pi`."""
        values = self.rewards.copy()
        for rows in self.levels_internal:
            if len(rows) == 0:
                continue
            nodes = self.internal[rows]
            values[nodes] = np.sum(pi[rows] * values[self.children[rows]], axis=1)
        return values

    def reach(self, pi: FloatArray) -> FloatArray:
        """Probability of visiting every node, starting from rho over the roots."""
        mass = np.zeros(len(self.states))
        mass[self.roots] = self.rho
        for rows in reversed(self.levels_internal):
            if len(rows) == 0:
                continue
            nodes = self.internal[rows]
            mass[self.children[rows]] = mass[nodes][:, None] * pi[rows]
        return mass

    def tilted(self, values: FloatArray, beta: float) -> FloatArray:
        """Rows π_base(a|s) * exp(beta * V(s ⊕ a)), normalized per row."""
        with np.errstate(divide="ignore"):
            log_w = np.log(self.base_probs) + beta * values[self.children]
        log_w -= np.max(log_w, axis=1, keepdims=True)
        w = np.exp(log_w)
        return np.asarray(w / w.sum(axis=1, keepdims=True), dtype=np.float64)

    def root_value(self, values: FloatArray) -> float:
        return float(np.dot(self.rho, values[self.roots]))


@dataclass
class OracleSolution:
    beta: float
    v_star: dict[str, float]
    pi_star: dict[str, FloatArray]
    converged: bool
    residual: float
    iterations_used: int
    vocab: Vocabulary = field(repr=False)

    def step_distribution(self, state: State) -> NextTokenDistribution:
        return NextTokenDistribution.from_dense(self.pi_star[state.key])

    def to_json(self) -> str:
        return json.dumps(
            {
                "beta": self.beta,
                "converged": self.converged,
                "residual": self.residual,
                "iterations_used": self.iterations_used,
                "v_star": self.v_star,
                "pi_star": {k: row.tolist() for k, row in self.pi_star.items()},
            },
            sort_keys=True,
        )


def _solution(
    m: EnumerableMdp, beta: float, values: FloatArray, converged: bool, residual: float, iters: int
) -> OracleSolution:
    pi = m.tilted(values, beta)
    return OracleSolution(
        beta=beta,
        v_star={s.key: float(values[i]) for i, s in enumerate(m.states)},
        pi_star={m.states[n].key: pi[r] for r, n in enumerate(m.internal)},
        converged=converged,
        residual=residual,
        iterations_used=iters,
        vocab=m.vocab,
    )


def solve_fixed_point(
    m: EnumerableMdp, beta: float, tol: float = 1e-10, max_iters: int = 10_000
) -> OracleSolution:
    """
    Iterate V <- E_{π_V}[R] with π_V ∝ π_base * exp(beta * V(child)), starting from the
    base-policy values, until the max-norm change is <= tol or max_iters sweeps ran.
    Non-convergence is reported in the solution, not raised.
    """
    if tol <= 0:
        raise InvariantViolation(f"tol must be > 0, got {tol}")
    started = time.perf_counter()
    values = m.evaluate(m.base_probs)
    residual = float("inf")
    iters = 0
    while iters < max_iters:
        iters += 1
        updated = m.evaluate(m.tilted(values, beta))
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual <= tol:
            break
    converged = residual <= tol
    logger.info(
        f"Oracle fixed point {'converged' if converged else 'did not converge'} "
        f"after {iters} sweeps (residual {residual:.3e})",
        extra={
            "operation": "solve_fixed_point",
            "beta": beta,
            "count": iters,
            "duration_ms": round((time.perf_counter() - started) * 1000, 2),
        },
    )
    return _solution(m, beta, values, converged, residual, iters)


def backward_induction_values(m: EnumerableMdp, beta: float) -> dict[str, float]:
    """The finite-horizon fixed point in one deepest-first sweep."""
    values = m.rewards.copy()
    for rows in m.levels_internal:
        if len(rows) == 0:
            continue
        nodes = m.internal[rows]
        child_values = values[m.children[rows]]
        with np.errstate(divide="ignore"):
            log_w = np.log(m.base_probs[rows]) + beta * child_values
        log_w -= np.max(log_w, axis=1, keepdims=True)
        w = np.exp(log_w)
        pi = w / w.sum(axis=1, keepdims=True)
        values[nodes] = np.sum(pi * child_values, axis=1)
    return {s.key: float(values[i]) for i, s in enumerate(m.states)}


def q_star_row(m: EnumerableMdp, solution: OracleSolution, state: State) -> FloatArray:
    """Q*(a|s) = V*(s ⊕ a) for every token a."""
    node = m.index[state.key]
    row = m.internal_row[node]
    if row < 0:
        raise InvariantViolation(f"state {state.key!r} is terminal")
    return np.array([solution.v_star[m.states[c].key] for c in m.children[row]])


def exact_policy_value(m: EnumerableMdp, policy: StepPolicy) -> float:
    """E_{x~rho, y~policy}[R(x, y)] by summing over every completion."""
    return m.root_value(m.evaluate(m.policy_matrix(policy)))


@dataclass(frozen=True)
class VisitationMeasure:
    d_pi: dict[tuple[str, int], float]

    @property
    def total(self) -> float:
        return float(sum(self.d_pi.values()))


def visitation_measure(m: EnumerableMdp, policy: StepPolicy) -> VisitationMeasure:
    """d^π(s, a) = sum_h P(s_h = s, a_h = a); entries with zero mass are omitted."""
    pi = m.policy_matrix(policy)
    mass = m.reach(pi)
    d_pi: dict[tuple[str, int], float] = {}
    for row, node in enumerate(m.internal):
        if mass[node] == 0.0:
            continue
        key = m.states[node].key
        for a in np.nonzero(pi[row])[0]:
            d_pi[(key, int(a))] = float(mass[node] * pi[row, a])
    return VisitationMeasure(d_pi)


def optimality_gap(m: EnumerableMdp, solution: OracleSolution, policy: StepPolicy) -> float:
    """V*(rho) - V_policy(rho), the expected-reward gap under the initial distribution."""
    if not solution.converged:
        raise UnconvergedOracle(
            f"oracle at beta={solution.beta} did not converge (residual {solution.residual:.3e})"
        )
    return exact_policy_value(m, solution) - exact_policy_value(m, policy)


@dataclass(frozen=True)
class KlResult:
    total: float
    per_token: float
    expected_length: float


def exact_kl(m: EnumerableMdp, p: StepPolicy, q: StepPolicy) -> KlResult:
    """
    Trajectory-level KL(p || q) under rho, and the same divided by p's expected length.

    Raises:
        SupportViolation: If p puts mass on a token q gives zero at a state p reaches.
    """
    pi_p = m.policy_matrix(p)
    pi_q = m.policy_matrix(q)
    mass = m.reach(pi_p)
    total = 0.0
    expected_length = 0.0
    for row, node in enumerate(m.internal):
        if mass[node] == 0.0:
            continue
        kl = kl_divergence(pi_p[row], pi_q[row])
        if not np.isfinite(kl):
            raise SupportViolation(f"q has zero mass where p is positive at {m.states[node].key!r}")
        total += float(mass[node]) * kl
        expected_length += float(mass[node])
    per_token = total / expected_length if expected_length > 0 else 0.0
    return KlResult(total, per_token, expected_length)


def base_step_policy(m: EnumerableMdp) -> TemperedBase:
    return TemperedBase(m.base, m.temperature)

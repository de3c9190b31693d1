"""Token-level MDP: deterministic concatenation transitions and episode termination."""

from app.core.errors import ExtendingTerminalState, InvariantViolation
from app.schemas.mdp import State, Trajectory, Vocabulary


def ends_with_eos(state: State, vocab: Vocabulary) -> bool:
    return vocab.eos is not None and bool(state.generated) and state.generated[-1] == vocab.eos


def is_terminal(state: State, vocab: Vocabulary, max_length: int) -> bool:
    """An episode ends on eos or once `max_length` tokens have been generated."""
    return ends_with_eos(state, vocab) or len(state.generated) >= max_length


def extend_state(state: State, token: int, vocab: Vocabulary) -> State:
    """
    Apply the transition f(s, a) = s ⊕ a.

    Raises:
        InvariantViolation: If `token` is outside the vocabulary.
        ExtendingTerminalState: If `state` already ends in eos.
    """
    if not vocab.contains(token):
        raise InvariantViolation(f"token {token} outside vocabulary of size {vocab.vocab_size}")
    if ends_with_eos(state, vocab):
        raise ExtendingTerminalState(f"state {state.key!r} already ends in eos")
    return State(prompt=state.prompt, generated=state.generated + (token,))


def validate_trajectory(trajectory: Trajectory, vocab: Vocabulary) -> None:
    """Check token ranges and that eos, if present, is the single final token."""
    for token in trajectory.prompt + trajectory.completion:
        if not vocab.contains(token):
            raise InvariantViolation(
                f"token {token} outside vocabulary of size {vocab.vocab_size}"
            )
    if vocab.eos is not None and vocab.eos in trajectory.completion:
        if trajectory.completion.count(vocab.eos) != 1 or trajectory.completion[-1] != vocab.eos:
            raise InvariantViolation("eos must appear exactly once, as the final completion token")

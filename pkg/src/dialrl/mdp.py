"""Token-level MDP over (context, response) pairs.

States are the context plus the generated prefix, actions are next tokens,
transitions are deterministic appends, and the reward is terminal: paid once,
when EOS is emitted or the horizon is hit, by comparing the full generated
response against the target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .corpus import ContextResponsePair


class MdpError(ValueError):
    pass


@dataclass(frozen=True)
class HorizonConfig:
    max_response_len: int  # T
    gamma: float = 1.0

    def __post_init__(self):
        if self.max_response_len < 1:
            raise MdpError("horizon T must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise MdpError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class EpisodeState:
    context: tuple[int, ...]
    prefix: tuple[int, ...]
    horizon: int
    eos_id: int

    @property
    def t(self) -> int:
        return len(self.prefix)

    @property
    def terminal(self) -> bool:
        return (len(self.prefix) > 0 and self.prefix[-1] == self.eos_id) \
            or len(self.prefix) >= self.horizon


@dataclass(frozen=True)
class Transition:
    state: EpisodeState
    action: int
    reward: float
    next_state: EpisodeState
    done: bool


@dataclass(frozen=True)
class ReturnAnnotatedSequence:
    """A pair plus its return; under terminal reward and gamma=1 the return is
    the terminal reward at every position."""

    pair: ContextResponsePair
    terminal_reward: float
    gamma: float = 1.0

    @property
    def sequence_return(self) -> float:
        return self.per_token_returns[0]

    @property
    def per_token_returns(self) -> tuple[float, ...]:
        L = len(self.pair.response)
        return tuple(self.gamma ** (L - 1 - t) * self.terminal_reward for t in range(L))


def step(state: EpisodeState, action: int) -> tuple[EpisodeState, bool]:
    """Deterministic transition; done iff the action is EOS or the horizon is reached."""
    if state.terminal:
        raise MdpError("cannot step a terminal state")
    nxt = EpisodeState(
        context=state.context,
        prefix=state.prefix + (int(action),),
        horizon=state.horizon,
        eos_id=state.eos_id,
    )
    return nxt, nxt.terminal


def episode_from_pair(
    pair: ContextResponsePair,
    reward_fn: Callable[[Sequence[int], ContextResponsePair], float],
    horizon: int,
    eos_id: int,
) -> list[Transition]:
    """Replay the target response as an episode; only the final transition pays reward."""
    if horizon < len(pair.response):
        raise MdpError(
            f"horizon {horizon} < response length {len(pair.response)}; truncate upstream")
    transitions = []
    state = EpisodeState(context=pair.context, prefix=(), horizon=horizon, eos_id=eos_id)
    for t, action in enumerate(pair.response):
        nxt, done = step(state, action)
        reward = float(reward_fn(pair.response, pair)) if done else 0.0
        if not 0.0 <= reward <= 1.0:
            raise MdpError(f"reward {reward} outside [0, 1]")
        transitions.append(Transition(state, int(action), reward, nxt, done))
        state = nxt
    return transitions


def replay(transitions: list[Transition]) -> tuple[int, ...]:
    """Reconstruct the response from a transition list (determinism check aid)."""
    return tuple(t.action for t in transitions)


def annotate_returns(
    pairs: Sequence[ContextResponsePair],
    reward_fn: Callable[[Sequence[int], ContextResponsePair], float],
    gamma: float = 1.0,
) -> list[ReturnAnnotatedSequence]:
    if not 0.0 < gamma <= 1.0:
        raise MdpError("gamma must lie in (0, 1]")
    return [
        ReturnAnnotatedSequence(pair=p, terminal_reward=float(reward_fn(p.response, p)), gamma=gamma)
        for p in pairs
    ]

"""The two naive protocols that motivate the main construction.

Attempt 1 elects rare "leaders" with a 1/N coin and spreads the OR of the
coins; whether anyone saw a 1 hints at the population size. Attempt 2 gives
every agent a fair colour and splits or dies depending on whether the next
two neighbours share a colour. Both plug into the engine through the same
kernel interface as the main protocol. They are meant to fail: constants are
exposed as options and the defaults put each protocol's expected change at
zero when m = N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import SimParams
from .protocol import ACT_DIE_EVAL, ACT_NONE, ACT_SPLIT, AgentAction, StepResult, toss_biased_coin
from .streams import CoinStream, agent_keys, first_words

_MASK53 = (1 << 53) - 1

DEFAULT_SHRINK = 1 / 64


@dataclass(frozen=True)
class BaselineOptions:
    attempt1_phase_rounds: int | None = None
    attempt1_shrink: float = DEFAULT_SHRINK
    attempt1_grow: float | None = None
    attempt2_phase_rounds: int = 4
    attempt2_c: float = 2.0

    def phase1(self, params: SimParams) -> int:
        return self.attempt1_phase_rounds or 3 * params.log2_n

    def grow1(self) -> float:
        # no 1 is seen with probability ~exp(-m/N); this balances growth and
        # shrinkage exactly at m = N
        return self.attempt1_grow if self.attempt1_grow is not None else self.attempt1_shrink * (math.e - 1)


@dataclass(frozen=True)
class BaselineState:
    variant: str
    phase_round: int = 0
    coin: int = 0
    seen_one: int = 0
    color: int = 0
    first_color: int = 0
    seen_count: int = 0
    same_color: int = 0


def attempt1_message(state: BaselineState) -> int:
    return state.seen_one | state.coin


def attempt2_message(state: BaselineState) -> int:
    return state.color


def attempt1_step(
    state: BaselineState, nbr: int | None, params: SimParams, coins: CoinStream, options: BaselineOptions = BaselineOptions()
) -> tuple[BaselineState, AgentAction]:
    """One round of Attempt 1; ``nbr`` is the neighbour's bit or None.

    A dying agent's state is returned as it was on entry.
    """
    L = options.phase1(params)
    r = state.phase_round
    if r == 0:
        coin = toss_biased_coin(params.log2_n, coins)
        return replace(state, phase_round=1, coin=coin, seen_one=coin), AgentAction.NONE
    before = state
    seen = state.seen_one | int(nbr == 1)
    state = replace(state, seen_one=seen)
    if r < L - 1:
        return replace(state, phase_round=r + 1), AgentAction.NONE
    action = AgentAction.NONE
    u = coins.uniform()
    if not seen:
        if u < options.grow1():
            action = AgentAction.SPLIT
    elif u < options.attempt1_shrink:
        return before, AgentAction.DIE
    return replace(state, phase_round=0, coin=0, seen_one=0), action


def attempt2_step(
    state: BaselineState, nbr: int | None, params: SimParams, coins: CoinStream, options: BaselineOptions = BaselineOptions()
) -> tuple[BaselineState, AgentAction]:
    """One round of Attempt 2; ``nbr`` is the neighbour's colour or None."""
    L = options.attempt2_phase_rounds
    r = state.phase_round
    if r == 0:
        return replace(state, phase_round=1, color=coins.bit(), seen_count=0, first_color=0, same_color=0), AgentAction.NONE
    before = state
    if nbr is not None and state.seen_count == 0:
        state = replace(state, first_color=nbr, seen_count=1)
    elif nbr is not None and state.seen_count == 1:
        state = replace(state, same_color=int(nbr == state.first_color), seen_count=2)
    if r < L - 1:
        return replace(state, phase_round=r + 1), AgentAction.NONE
    action = AgentAction.NONE
    if state.seen_count == 2:
        if not state.same_color:
            return before, AgentAction.DIE
        if coins.uniform() >= options.attempt2_c / params.n_target:
            action = AgentAction.SPLIT
    return replace(state, phase_round=0), action


BASELINE_COLUMNS = {
    "phase_round": np.int32,
    "coin": np.uint8,
    "seen_one": np.uint8,
    "color": np.uint8,
    "first_color": np.uint8,
    "seen_count": np.uint8,
    "same_color": np.uint8,
}


class BaselineKernel:
    """Column-wise Attempt 1 / Attempt 2 for the engine."""

    columns = BASELINE_COLUMNS
    round_column = "phase_round"

    def __init__(self, params: SimParams, variant: str, options: BaselineOptions | None = None):
        if variant not in ("attempt1", "attempt2"):
            raise ValueError(f"unknown baseline {variant!r}")
        self.params = params
        self.name = variant
        self.options = options or BaselineOptions()
        self.period = self.options.phase1(params) if variant == "attempt1" else self.options.attempt2_phase_rounds
        if self.period < 3:
            raise ValueError("baseline phases need at least 3 rounds")

    def empty_columns(self, n: int) -> dict[str, np.ndarray]:
        return {name: np.zeros(n, dtype=dtype) for name, dtype in self.columns.items()}

    def row(self, state: BaselineState) -> dict[str, int]:
        if not 0 <= state.phase_round < self.period:
            raise ValueError(f"phase_round {state.phase_round} outside [0, {self.period})")
        return {name: int(getattr(state, name)) for name in self.columns}

    def state_at(self, cols: dict[str, np.ndarray], i: int) -> BaselineState:
        return BaselineState(self.name, **{name: int(cols[name][i]) for name in self.columns})

    def needs_step(self, pop) -> bool:
        return True

    def needs_matching(self, pop) -> bool:
        return True

    def quiet_advance(self, cols: dict[str, np.ndarray]) -> None:
        raise AssertionError("baseline rounds are never quiet")

    def messages(self, cols: dict[str, np.ndarray]) -> np.ndarray:
        if self.name == "attempt1":
            return cols["seen_one"] | cols["coin"]
        return cols["color"]

    def step(self, cols, partner, round_index, seed, handles, lo=0, hi=None) -> StepResult:
        hi = len(partner) if hi is None else hi
        sl = slice(lo, hi)
        msg_all = self.messages(cols)
        nbr = partner[sl]
        has = nbr >= 0
        n_msg = np.where(has, msg_all[np.where(has, nbr, 0)], 0)
        new = {name: cols[name][sl].copy() for name in self.columns}
        r = new["phase_round"]
        action = np.zeros(hi - lo, dtype=np.int8)
        words = first_words(agent_keys(seed, round_index, handles[sl]))
        start = r == 0
        last = r == self.period - 1
        if self.name == "attempt1":
            self._attempt1(new, has, n_msg, words, start, last, action)
        else:
            self._attempt2(new, has, n_msg, words, start, last, action)
        dead = action == ACT_DIE_EVAL
        nxt = np.where(last, 0, r + 1).astype(np.int32)
        new["phase_round"] = np.where(dead, r, nxt).astype(np.int32)
        for name in self.columns:
            if name != "phase_round":
                new[name][dead] = cols[name][sl][dead]
        empty = np.empty(0, dtype=np.int64)
        return StepResult(new, action, empty, (empty, empty))

    def _uniform(self, words: np.ndarray) -> np.ndarray:
        return (words & np.uint64(_MASK53)).astype(np.float64) / float(1 << 53)

    def _attempt1(self, new, has, n_msg, words, start, last, action):
        a = self.params.log2_n
        mask = np.uint64((1 << a) - 1)
        coin = ((words & mask) == mask).astype(np.uint8)
        new["coin"][start] = coin[start]
        new["seen_one"][start] = coin[start]
        prop = ~start & has & (n_msg == 1)
        new["seen_one"][prop] = 1
        u = self._uniform(words)
        seen = new["seen_one"] == 1
        grow = last & ~seen & (u < self.options.grow1())
        die = last & seen & (u < self.options.attempt1_shrink)
        action[grow] = ACT_SPLIT
        action[die] = ACT_DIE_EVAL
        reset = last & ~die
        new["coin"][reset] = 0
        new["seen_one"][reset] = 0

    def _attempt2(self, new, has, n_msg, words, start, last, action):
        new["color"][start] = (words[start] & np.uint64(1)).astype(np.uint8)
        for name in ("seen_count", "first_color", "same_color"):
            new[name][start] = 0
        obs = ~start & has
        first = obs & (new["seen_count"] == 0)
        second = obs & (new["seen_count"] == 1)
        new["first_color"][first] = n_msg[first]
        new["same_color"][second] = n_msg[second] == new["first_color"][second]
        new["seen_count"][first | second] += 1
        decided = last & (new["seen_count"] == 2)
        die = decided & (new["same_color"] == 0)
        keep = self._uniform(words) < self.options.attempt2_c / self.params.n_target
        split = decided & (new["same_color"] == 1) & ~keep
        action[die] = ACT_DIE_EVAL
        action[split] = ACT_SPLIT

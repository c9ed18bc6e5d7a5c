"""Per-agent state machine of the population stability protocol.

The scalar functions here operate on one ``AgentState`` at a time and are the
reference semantics. ``MainKernel`` applies the same transition to a whole
population stored column-wise in numpy arrays; the engine runs the kernel and
the test suite checks it against ``main_step``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import (
    AgentState,
    Message,
    SimParams,
    decode_message,
    encode_message,
    is_er,
)
from .streams import CoinStream, agent_keys, first_words


class AgentAction(enum.Enum):
    NONE = "none"
    SPLIT = "split"
    DIE = "die"


def toss_biased_coin(a: int, coins: CoinStream) -> int:
    """Return 1 with probability 2**-a using exactly ``a`` fair bits."""
    if a < 0:
        raise ValueError("bias exponent must be non-negative")
    c = 1
    for _ in range(a):
        if coins.bit() == 0:
            c = 0
    return c


def check_round_consistency(state: AgentState, nbr: Message, epoch_length: int) -> AgentAction:
    if nbr.present and is_er(state, epoch_length) != nbr.is_er:
        return AgentAction.DIE
    return AgentAction.NONE


def determine_if_leader(state: AgentState, params: SimParams, coins: CoinStream) -> AgentState:
    leader = toss_biased_coin(params.leader_exponent, coins)
    if not leader:
        return state.evolve(am_active=0)
    return state.evolve(
        am_active=1,
        color=coins.bit(),
        recruiting=1,
        to_recruit=params.half_log_n,
    )


def recruitment_step(state: AgentState, nbr: Message, params: SimParams) -> AgentState:
    if nbr.active == 0 and state.recruiting == 1:
        state = state.evolve(recruiting=0, to_recruit=state.to_recruit - 1)
    elif state.am_active == 0 and nbr.recruiting == 1:
        subphase = -(-(state.round + 1) // params.t_inner)
        state = state.evolve(
            am_active=1,
            color=nbr.color,
            recruiting=0,
            to_recruit=params.half_log_n - subphase,
        )
    if (state.round + 1) % params.t_inner == 0 and state.am_active == 1:
        state = state.evolve(recruiting=1)
    return state


def evaluation_step(
    state: AgentState, nbr: Message, params: SimParams, coins: CoinStream
) -> tuple[AgentState, AgentAction]:
    action = AgentAction.NONE
    if state.am_active == 1 and nbr.active == 1:
        if nbr.color == state.color:
            if toss_biased_coin(params.split_exponent, coins) == 0:
                action = AgentAction.SPLIT
        else:
            return state, AgentAction.DIE
    return state.evolve(am_active=0, color=0, recruiting=0), action


def main_step(
    state: AgentState,
    nbr_wire: tuple[int, int, int] | None,
    params: SimParams,
    coins: CoinStream,
) -> tuple[AgentState, AgentAction]:
    """One synchronous round for one agent.

    ``nbr_wire`` is the neighbour's 3-bit message, or ``None`` when the agent
    is unmatched. A ``DIE`` result carries the pre-step state unchanged.
    """
    return step_with_message(state, decode_message(nbr_wire), params, coins)


def step_with_message(
    state: AgentState, nbr: Message, params: SimParams, coins: CoinStream
) -> tuple[AgentState, AgentAction]:
    """``main_step`` on an already decoded (or fully known) neighbour view."""
    T = params.epoch_length
    if check_round_consistency(state, nbr, T) is AgentAction.DIE:
        return state, AgentAction.DIE
    if state.round == 0:
        state = determine_if_leader(state, params, coins)
        return state.evolve(round=1 % T), AgentAction.NONE
    if state.round < T - 1:
        state = recruitment_step(state, nbr, params)
        return state.evolve(round=state.round + 1), AgentAction.NONE
    state, action = evaluation_step(state, nbr, params, coins)
    if action is AgentAction.DIE:
        return state, action
    return state.evolve(round=0), action


# -- vectorised population kernel ------------------------------------------

ACT_NONE = 0
ACT_SPLIT = 1
ACT_DIE_EVAL = 2
ACT_DIE_CONSISTENCY = 3

MAIN_COLUMNS = {
    "round": np.int32,
    "am_active": np.uint8,
    "color": np.uint8,
    "recruiting": np.uint8,
    "to_recruit": np.int32,
}


@dataclass
class StepResult:
    """Output of one kernel step over a slice of the population.

    ``columns`` are the successor states (rows of dying agents are left as
    they were), ``action`` holds one ACT_* code per agent. ``leaders`` and
    ``recruits`` (recruited index, recruiter index) feed observer-side
    cluster bookkeeping only.
    """

    columns: dict[str, np.ndarray]
    action: np.ndarray
    leaders: np.ndarray
    recruits: tuple[np.ndarray, np.ndarray]


def wire_columns(cols: dict[str, np.ndarray], epoch_length: int) -> tuple[np.ndarray, ...]:
    """The 3-bit messages of every agent as three uint8 arrays."""
    er = (cols["round"] == epoch_length - 1).astype(np.uint8)
    rec = cols["recruiting"]
    b1 = np.where(er, cols["am_active"], rec).astype(np.uint8)
    b2 = np.where(er | rec, cols["color"], cols["am_active"]).astype(np.uint8)
    return er, b1, b2


class MainKernel:
    """Column-wise implementation of ``main_step``.

    ``consistency_check`` and ``split_always`` exist only to build the
    mutants used by the verification battery.
    """

    name = "main"
    columns = MAIN_COLUMNS

    def __init__(self, params: SimParams, *, consistency_check: bool = True, split_always: bool = False):
        self.params = params
        self.consistency_check = consistency_check
        self.split_always = split_always

    # state <-> row conversion
    def empty_columns(self, n: int) -> dict[str, np.ndarray]:
        return {name: np.zeros(n, dtype=dtype) for name, dtype in self.columns.items()}

    def row(self, state: AgentState) -> dict[str, int]:
        if not 0 <= state.round < self.params.epoch_length:
            raise ValueError(f"round {state.round} outside [0, {self.params.epoch_length})")
        return {
            "round": state.round,
            "am_active": int(bool(state.am_active)),
            "color": int(bool(state.color)),
            "recruiting": int(bool(state.recruiting)),
            "to_recruit": state.to_recruit,
        }

    def state_at(self, cols: dict[str, np.ndarray], i: int) -> AgentState:
        return AgentState(**{name: int(cols[name][i]) for name in self.columns})

    # round classification
    def needs_step(self, pop) -> bool:
        """False when every agent would just advance its round counter."""
        if pop.count("recruiting"):
            return True
        T = self.params.epoch_length
        t = self.params.t_inner
        rv = pop.round_values()
        return bool(np.any((rv == 0) | (rv == T - 1) | ((rv + 1) % t == 0)))

    def needs_matching(self, pop) -> bool:
        """False when the step's outcome cannot depend on who meets whom."""
        T = self.params.epoch_length
        er_values = pop.round_values() == T - 1
        if er_values.any():
            if self.consistency_check and not er_values.all():
                return True
            cols = pop.cols
            if np.any(cols["am_active"][cols["round"] == T - 1]):
                return True
        return pop.count("recruiting") > 0

    def step(
        self,
        cols: dict[str, np.ndarray],
        partner: np.ndarray,
        round_index: int,
        seed: int,
        handles: np.ndarray,
        lo: int = 0,
        hi: int | None = None,
    ) -> StepResult:
        """Advance agents ``lo:hi``; ``partner`` indexes the whole population."""
        p = self.params
        T = p.epoch_length
        hi = len(partner) if hi is None else hi
        er_all, b1_all, b2_all = wire_columns(cols, T)

        sl = slice(lo, hi)
        rnd = cols["round"][sl]
        act = cols["am_active"][sl].copy()
        color = cols["color"][sl].copy()
        rec = cols["recruiting"][sl].copy()
        tr = cols["to_recruit"][sl].copy()
        er = er_all[sl]
        n = hi - lo
        action = np.zeros(n, dtype=np.int8)

        nbr = partner[sl]
        has = nbr >= 0
        safe = np.where(has, nbr, 0)
        n_er = er_all[safe]
        n_b1 = b1_all[safe]
        n_b2 = b2_all[safe]
        # decode: components that the 3-bit codec leaves unknown stay masked
        n_active = np.where(n_er == 1, n_b1, np.where(n_b1 == 1, 1, n_b2))
        n_color_known = has & ((n_er == 1) | (n_b1 == 1))
        n_rec_known = has & (n_er == 0)

        if self.consistency_check:
            die_c = has & (er != n_er)
        else:
            die_c = np.zeros(n, dtype=bool)
        action[die_c] = ACT_DIE_CONSISTENCY
        alive = ~die_c

        # leader selection
        lead_idx = np.flatnonzero(alive & (rnd == 0))
        leaders = np.empty(0, dtype=np.int64)
        if lead_idx.size:
            words = first_words(agent_keys(seed, round_index, handles[lo + lead_idx]))
            mask = np.uint64((1 << p.leader_exponent) - 1)
            is_leader = (words & mask) == mask
            act[lead_idx] = is_leader
            chosen = lead_idx[is_leader]
            color[chosen] = ((words[is_leader] >> np.uint64(p.leader_exponent)) & np.uint64(1)).astype(np.uint8)
            rec[chosen] = 1
            tr[chosen] = p.half_log_n
            leaders = chosen + lo

        # recruitment
        in_rec = alive & (rnd > 0) & (rnd < T - 1)
        branch1 = in_rec & has & (n_active == 0) & (rec == 1)
        rec[branch1] = 0
        tr[branch1] -= 1
        branch2 = in_rec & ~branch1 & (act == 0) & n_rec_known & (n_b1 == 1)
        b2_idx = np.flatnonzero(branch2)
        if b2_idx.size:
            act[b2_idx] = 1
            color[b2_idx] = n_b2[b2_idx]
            rec[b2_idx] = 0
            subphase = -(-(rnd[b2_idx] + 1) // p.t_inner)
            tr[b2_idx] = p.half_log_n - subphase
        boundary = in_rec & ((rnd + 1) % p.t_inner == 0) & (act == 1)
        rec[boundary] = 1

        # evaluation
        in_eval = alive & (rnd == T - 1)
        both = in_eval & (act == 1) & has & (n_active == 1)
        same = both & n_color_known & (n_b2 == color)
        diff = both & ~same
        action[diff] = ACT_DIE_EVAL
        same_idx = np.flatnonzero(same)
        if same_idx.size:
            if self.split_always:
                action[same_idx] = ACT_SPLIT
            else:
                words = first_words(agent_keys(seed, round_index, handles[lo + same_idx]))
                mask = np.uint64((1 << p.split_exponent) - 1)
                coin = (words & mask) == mask
                action[same_idx[~coin]] = ACT_SPLIT
        reset = in_eval & ~diff
        act[reset] = 0
        color[reset] = 0
        rec[reset] = 0

        new_round = np.where(rnd == T - 1, 0, rnd + 1).astype(np.int32)
        dead = die_c | diff
        new_round[dead] = rnd[dead]
        # dying agents keep their pre-step state
        for arr, name in ((act, "am_active"), (color, "color"), (rec, "recruiting"), (tr, "to_recruit")):
            arr[dead] = cols[name][sl][dead]

        return StepResult(
            columns={"round": new_round, "am_active": act, "color": color, "recruiting": rec, "to_recruit": tr},
            action=action,
            leaders=leaders,
            recruits=(b2_idx + lo, nbr[b2_idx]),
        )

    def quiet_advance(self, cols: dict[str, np.ndarray]) -> None:
        cols["round"] += 1

    def messages(self, cols: dict[str, np.ndarray]) -> tuple[np.ndarray, ...]:
        return wire_columns(cols, self.params.epoch_length)


def encode_population(states: list[AgentState], epoch_length: int) -> list[tuple[int, int, int]]:
    return [encode_message(s, epoch_length) for s in states]

"""Line-by-line transcription of the protocol pseudocode, used as a test oracle.

Kept deliberately naive: a mutable record per agent, the full 4-component
neighbour status (no 3-bit codec) and the bottom value modelled as None,
with every comparison against None false. The one departure from the
literal text is the ``active`` guard on "prepare for next round", which the
package adopts as a design decision; ``literal_prepare=True`` drops it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class OracleAgent:
    round: int
    amActive: int
    mycolor: int
    recruiting: int
    to_recruit: int


BOTTOM = None


def eq(x, y) -> bool:
    if x is BOTTOM or y is BOTTOM:
        return False
    return x == y


def toss_biased_coin(a, coins):
    c = 1
    for _ in range(1, a + 1):
        b = coins.bit()
        if b == 0:
            c = 0
    return c


class Oracle:
    def __init__(self, N: int, T_inner: int, literal_prepare: bool = False):
        self.N = N
        self.logN = int(math.log2(N))
        self.T_inner = T_inner
        self.interval = T_inner * self.logN // 2
        self.literal_prepare = literal_prepare

    def my_status(self, agent: OracleAgent):
        if agent.round == self.interval - 1:
            self_is_er = 1
        else:
            self_is_er = 0
        return (self_is_er, agent.amActive, agent.mycolor, agent.recruiting)

    def main_protocol_step(self, agent: OracleAgent, nbr_status, coins) -> str:
        """Mutates ``agent``; returns 'none', 'split' or 'die'."""
        # ExchangeMessages
        self_is_er = self.my_status(agent)[0]
        if nbr_status is BOTTOM:
            nbr = (BOTTOM, BOTTOM, BOTTOM, BOTTOM)
        else:
            nbr = nbr_status
        nbr_is_er, nbr_active, nbr_color, nbr_recruiting = nbr
        # CheckRoundConsistency
        if nbr_status is not BOTTOM and self_is_er != nbr_is_er:
            return "die"
        if agent.round == 0:
            self.determine_if_leader(agent, coins)
            agent.round = agent.round + 1
            return "none"
        elif agent.round < self.interval - 1:
            self.recruitment_phase(agent, nbr_active, nbr_color, nbr_recruiting)
            agent.round = agent.round + 1
            return "none"
        else:
            result = self.evaluation_phase(agent, nbr_active, nbr_color, coins)
            if result == "die":
                return "die"
            agent.round = 0
            return result

    def determine_if_leader(self, agent, coins):
        agent.amActive = toss_biased_coin(int(math.log2(8 * math.isqrt(self.N))), coins)
        if agent.amActive == 1:
            agent.mycolor = coins.bit()
            agent.recruiting = 1
            agent.to_recruit = self.logN // 2

    def recruitment_phase(self, agent, nbr_active, nbr_color, nbr_recruiting):
        if eq(nbr_active, 0) and agent.recruiting == 1:
            agent.recruiting = 0
            agent.to_recruit = agent.to_recruit - 1
        elif agent.amActive == 0 and eq(nbr_recruiting, 1):
            agent.amActive = 1
            agent.mycolor = nbr_color
            agent.recruiting = 0
            agent.to_recruit = self.logN // 2 - math.ceil((agent.round + 1) / self.T_inner)
        if agent.round % self.T_inner == self.T_inner - 1:
            if self.literal_prepare or agent.amActive == 1:
                agent.recruiting = 1

    def evaluation_phase(self, agent, nbr_active, nbr_color, coins):
        result = "none"
        if agent.amActive == 1 and eq(nbr_active, 1):
            if eq(nbr_color, agent.mycolor):
                c = toss_biased_coin(int(math.log2(math.isqrt(self.N) // 16)), coins)
                if c == 0:
                    result = "split"
            else:
                return "die"
        agent.amActive = 0
        agent.mycolor = 0
        agent.recruiting = 0
        return result

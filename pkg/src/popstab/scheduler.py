"""Random per-round matchings over the surviving agents."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Sequence

import numpy as np

MATCHING_MODES = ("minimal", "random_fraction")


@dataclass(frozen=True)
class Matching:
    pairs: frozenset[frozenset]
    unmatched: frozenset

    def partner_of(self, handle: Hashable) -> Hashable | None:
        for pair in self.pairs:
            if handle in pair:
                (other,) = pair - {handle}
                return other
        return None


def matched_count(m: int, gamma: Fraction, rng: np.random.Generator | None = None, mode: str = "minimal") -> int:
    """Number of matched agents: the smallest even count >= floor(gamma*m).

    In ``random_fraction`` mode the fraction is drawn uniformly from [gamma, 1]
    first; this consumes one draw from ``rng``.
    """
    if mode == "minimal":
        frac = Fraction(gamma)
    elif mode == "random_fraction":
        if rng is None:
            raise ValueError("random_fraction mode needs an rng")
        frac = Fraction(gamma) + (1 - Fraction(gamma)) * Fraction(float(rng.random()))
    else:
        raise ValueError(f"unknown matching mode {mode!r}")
    return 2 * math.floor(frac * m / 2)


def partner_indices(m: int, gamma: Fraction, rng: np.random.Generator, mode: str = "minimal") -> np.ndarray:
    """Partner index per agent (-1 when unmatched) for a uniform random matching.

    A uniformly random permutation is drawn; its first k entries are paired
    consecutively, which gives a uniform choice of matched subset and a
    uniform perfect matching on it.
    """
    k = matched_count(m, gamma, rng, mode)
    partner = np.full(m, -1, dtype=np.int64)
    if k == 0:
        return partner
    order = rng.permutation(m)[:k]
    left, right = order[0::2], order[1::2]
    partner[left] = right
    partner[right] = left
    return partner


def sample_matching(
    population_handles: Sequence[Hashable],
    gamma: Fraction | float | str,
    rng: np.random.Generator,
    mode: str = "minimal",
) -> Matching:
    handles = list(population_handles)
    partner = partner_indices(len(handles), Fraction(str(gamma)) if not isinstance(gamma, Fraction) else gamma, rng, mode)
    pairs = frozenset(
        frozenset((handles[i], handles[j])) for i, j in enumerate(partner) if j > i
    )
    unmatched = frozenset(handles[i] for i in np.flatnonzero(partner < 0))
    return Matching(pairs, unmatched)


def check_matching(matching: Matching, population_handles: Sequence[Hashable], gamma: Fraction) -> None:
    """Raise AssertionError if disjointness, coverage or the size bound fails."""
    seen: list = []
    for pair in matching.pairs:
        assert len(pair) == 2, f"degenerate pair {set(pair)}"
        seen.extend(pair)
    seen.extend(matching.unmatched)
    assert sorted(map(repr, seen)) == sorted(map(repr, population_handles)), "coverage violated"
    assert len(set(seen)) == len(seen), "pairs overlap"
    m = len(population_handles)
    assert 2 * len(matching.pairs) >= 2 * math.floor(Fraction(gamma) * m / 2), "too few matched"

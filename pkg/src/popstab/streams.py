"""Counter-based randomness keyed by (master seed, round, purpose/handle).

Every agent draws its coins from a stream that depends only on the master
seed, the global round index and the agent's handle, so results do not
depend on the order (or thread) in which agents are stepped.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "splitmix64-keyed/v1; matching+adversary: numpy PCG64"

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

# domain tags keep agent, matching and adversary streams apart
PURPOSE_AGENT = 0x5A17
PURPOSE_MATCHING = 0x3A7C
PURPOSE_ADVERSARY = 0xAD5E
PURPOSES = {"matching": PURPOSE_MATCHING, "adversary": PURPOSE_ADVERSARY}


def _mix_int(x: int) -> int:
    x &= _M64
    x = ((x ^ (x >> 30)) * _MUL1) & _M64
    x = ((x ^ (x >> 27)) * _MUL2) & _M64
    return x ^ (x >> 31)


def _mix_array(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MUL1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MUL2)
    x ^= x >> np.uint64(31)
    return x


def stream_key(master_seed: int, round_index: int, purpose: int, handle: int = 0) -> int:
    h = _mix_int(master_seed + _GOLDEN)
    h = _mix_int(h ^ ((round_index + 2 * _GOLDEN) & _M64))
    h = _mix_int(h ^ purpose)
    return _mix_int(h ^ ((handle + 3 * _GOLDEN) & _M64))


def agent_keys(master_seed: int, round_index: int, handles: np.ndarray) -> np.ndarray:
    """Vectorised ``stream_key`` for a batch of agent handles."""
    h = _mix_int(master_seed + _GOLDEN)
    h = _mix_int(h ^ ((round_index + 2 * _GOLDEN) & _M64))
    h = _mix_int(h ^ PURPOSE_AGENT)
    salted = handles.astype(np.uint64) + np.uint64(3 * _GOLDEN & _M64)
    return _mix_array(salted ^ np.uint64(h))


def word_from_key(key: int, index: int) -> int:
    return _mix_int(key + (index + 1) * _GOLDEN)


def first_words(keys: np.ndarray) -> np.ndarray:
    """Word 0 of each keyed stream (64 coin bits, LSB first)."""
    return _mix_array(keys + np.uint64(_GOLDEN))


class CoinStream:
    """Deterministic source of unbiased bits for one (seed, round, owner) key.

    Bits are taken least-significant first from successive 64-bit words.
    ``consumed`` counts the bits drawn so far.
    """

    __slots__ = ("key", "consumed", "_word", "_word_index")

    def __init__(self, key: int):
        self.key = key
        self.consumed = 0
        self._word_index = -1
        self._word = 0

    def bit(self) -> int:
        index, offset = divmod(self.consumed, 64)
        if index != self._word_index:
            self._word = word_from_key(self.key, index)
            self._word_index = index
        self.consumed += 1
        return (self._word >> offset) & 1

    def bits(self, count: int) -> list[int]:
        return [self.bit() for _ in range(count)]

    def uniform(self) -> float:
        """A float in [0, 1) built from the next 53 bits."""
        value = 0
        for i in range(53):
            value |= self.bit() << i
        return value / float(1 << 53)


def seed_streams(master_seed: int, round_index: int, owner: int | str) -> CoinStream:
    """Coin stream for an agent handle, or for ``"matching"``/``"adversary"``."""
    if isinstance(owner, str):
        try:
            purpose = PURPOSES[owner]
        except KeyError:
            raise ValueError(f"unknown stream purpose {owner!r}") from None
        return CoinStream(stream_key(master_seed, round_index, purpose))
    if owner < 0:
        raise ValueError("agent handles are non-negative")
    return CoinStream(stream_key(master_seed, round_index, PURPOSE_AGENT, owner))


def numpy_generator(master_seed: int, round_index: int, purpose: str) -> np.random.Generator:
    """A numpy Generator seeded from the keyed stream for ``purpose``."""
    return np.random.Generator(np.random.PCG64(seed_streams(master_seed, round_index, purpose).key))

"""Budgeted worst-case adversary: operations, snapshots and built-in strategies."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .core import AgentState, ConfigError, SimParams


@dataclass(frozen=True)
class Delete:
    handle: int


@dataclass(frozen=True)
class Insert:
    state: Any


@dataclass(frozen=True)
class Modify:
    handle: int
    state: Any


AdversaryOp = Delete | Insert | Modify


@dataclass(frozen=True)
class Snapshot:
    """Read-only view of the population at the start of a round.

    ``columns`` and ``handles`` are non-writeable numpy views; ``history`` is
    the per-round outcome log so far (oldest first).
    """

    protocol: str
    round_index: int
    params: SimParams
    period: int
    round_column: str
    handles: np.ndarray
    columns: Mapping[str, np.ndarray]
    round_counts: Mapping[int, int]
    history: Sequence[Any] = ()
    options: Mapping[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.handles)

    def majority_round(self) -> int:
        if not self.round_counts:
            return self.round_index % self.period
        return max(sorted(self.round_counts), key=lambda r: self.round_counts[r])

    def epoch_start(self) -> int:
        return self.round_index - self.round_index % self.period

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.handles).tobytes())
        for name in sorted(self.columns):
            h.update(np.ascontiguousarray(self.columns[name]).tobytes())
        return h.hexdigest()


def _pick(rng: np.random.Generator, candidates: np.ndarray, count: int) -> np.ndarray:
    if count <= 0 or candidates.size == 0:
        return candidates[:0]
    if candidates.size <= count:
        return candidates
    return np.sort(rng.choice(candidates, size=count, replace=False))


def _actives_by_color(snap: Snapshot, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    active = snap.columns["am_active"] == 1
    if mask is not None:
        active &= mask
    color = snap.columns["color"]
    return np.flatnonzero(active & (color == 0)), np.flatnonzero(active & (color == 1))


def _minority(c0: np.ndarray, c1: np.ndarray, target: int | None) -> np.ndarray:
    if target is not None:
        return (c0, c1)[target]
    if c0.size == 0:
        return c1
    if c1.size == 0:
        return c0
    return c1 if c1.size < c0.size else c0


def _majority(c0: np.ndarray, c1: np.ndarray, target: int | None) -> np.ndarray:
    if target is not None:
        return (c0, c1)[target]
    return c1 if c1.size > c0.size else c0


class Strategy:
    """Base class; subclasses implement ``act`` and must not mutate the snapshot."""

    name = "base"
    uses_modify = False
    protocols: tuple[str, ...] = ("main",)

    def __init__(self, **options: Any):
        self.options = options

    def act(self, snap: Snapshot, budget: int, rng: np.random.Generator) -> list[AdversaryOp]:
        raise NotImplementedError


class NullStrategy(Strategy):
    name = "null"
    protocols = ("main", "attempt1", "attempt2")

    def act(self, snap, budget, rng):
        return []


class UniformDeleter(Strategy):
    name = "uniform_deleter"
    protocols = ("main", "attempt1", "attempt2")

    def act(self, snap, budget, rng):
        idx = _pick(rng, np.arange(snap.size), budget)
        return [Delete(int(snap.handles[i])) for i in idx]


class LeaderAssassin(Strategy):
    """Delete freshly elected leaders.

    Main protocol: at majority round 1, delete active agents of the minority
    colour (or ``target_color``), skewing the colour balance. Attempt 1:
    at phase round 1, delete agents whose coin came up 1.
    """

    name = "leader_assassin"
    protocols = ("main", "attempt1")

    def act(self, snap, budget, rng):
        at = int(self.options.get("at_round", 1))
        if snap.majority_round() != at:
            return []
        if snap.protocol == "attempt1":
            targets = np.flatnonzero(snap.columns["coin"] == 1)
        else:
            c0, c1 = _actives_by_color(snap)
            targets = _minority(c0, c1, self.options.get("target_color"))
        return [Delete(int(snap.handles[i])) for i in _pick(rng, targets, budget)]


class ColorFlooder(Strategy):
    """Insert would-be leaders of one colour during the first subphase."""

    name = "color_flooder"

    def act(self, snap, budget, rng):
        r = snap.majority_round()
        last = int(self.options.get("last_round", snap.params.t_inner - 1))
        if not 1 <= r <= last:
            return []
        state = AgentState(
            round=r,
            am_active=1,
            color=int(self.options.get("target_color", 0)),
            recruiting=1,
            to_recruit=snap.params.half_log_n,
        )
        return [Insert(state) for _ in range(budget)]


def inserted_this_epoch(snap: Snapshot) -> int:
    start = snap.epoch_start()
    return sum(o.inserts for o in snap.history[start:])


class DesyncInserter(Strategy):
    """Insert inactive agents whose round counter is off by ``offset``.

    ``per_epoch_limit`` caps insertions per epoch and ``stop_epoch`` ends the
    injection; both are read back from the outcome history so the strategy
    stays a pure function of the snapshot.
    """

    name = "desync_inserter"

    def act(self, snap, budget, rng):
        T = snap.period
        epoch = snap.round_index // T
        stop = self.options.get("stop_epoch")
        if stop is not None and epoch >= int(stop):
            return []
        count = budget
        limit = self.options.get("per_epoch_limit")
        if limit is not None:
            count = min(count, int(limit) - inserted_this_epoch(snap))
        if count <= 0:
            return []
        offset = int(self.options.get("offset", T // 2))
        state = AgentState(round=(snap.majority_round() + offset) % T)
        return [Insert(state) for _ in range(count)]


class EvalSuppressor(Strategy):
    """Delete active agents just before they evaluate."""

    name = "eval_suppressor"

    def act(self, snap, budget, rng):
        T = snap.period
        if snap.majority_round() != T - 1:
            return []
        at_eval = snap.columns["round"] == T - 1
        c0, c1 = _actives_by_color(snap, at_eval)
        targets = _majority(c0, c1, self.options.get("target_color"))
        return [Delete(int(snap.handles[i])) for i in _pick(rng, targets, budget)]


def projected_color_mass(snap: Snapshot) -> tuple[int, int]:
    """Active agents per colour weighted by 2**to_recruit.

    Recruitment conserves this sum, so it estimates each colour's count at
    the coming evaluation round.
    """
    cols = snap.columns
    active = cols["am_active"] == 1
    weight = np.left_shift(1, np.clip(cols["to_recruit"], 0, 62).astype(np.int64))
    c1 = int(weight[active & (cols["color"] == 1)].sum())
    c0 = int(weight[active & (cols["color"] == 0)].sum())
    return c0, c1


def predicted_eval_change(c0: int, c1: int, m: int, params: SimParams) -> float:
    """Expected population change at evaluation for colour counts c0, c1."""
    if m <= 1:
        return 0.0
    eps = 2.0 ** -params.split_exponent
    return float(params.gamma) * ((c0 - c1) ** 2 - eps * (c0 * c0 + c1 * c1)) / m


class AdaptiveGreedy(Strategy):
    """Each round, play whichever template moves the projected size furthest from N.

    Templates: the other built-in strategies plus a recolouring template that
    uses Modify to flip minority-colour actives at round 1.
    """

    name = "adaptive_greedy"
    uses_modify = True

    TEMPLATES = ("uniform_deleter", "leader_assassin", "color_flooder", "eval_suppressor", "recolor")

    def _recolor(self, snap, budget, rng):
        if snap.majority_round() != 1:
            return []
        c0, c1 = _actives_by_color(snap)
        victims = _minority(c0, c1, None)
        ops = []
        for i in _pick(rng, victims, budget):
            cols = snap.columns
            ops.append(
                Modify(
                    int(snap.handles[i]),
                    AgentState(
                        round=int(cols["round"][i]),
                        am_active=1,
                        color=1 - int(cols["color"][i]),
                        recruiting=int(cols["recruiting"][i]),
                        to_recruit=int(cols["to_recruit"][i]),
                    ),
                )
            )
        return ops

    def _score(self, snap: Snapshot, ops: list[AdversaryOp]) -> float:
        c0, c1 = projected_color_mass(snap)
        m = snap.size
        idx = {int(h): i for i, h in enumerate(snap.handles)} if ops else {}
        cols = snap.columns
        weight = lambda i: 1 << max(int(cols["to_recruit"][i]), 0)  # noqa: E731
        for op in ops:
            if isinstance(op, Delete) and op.handle in idx:
                i = idx[op.handle]
                m -= 1
                if cols["am_active"][i]:
                    if cols["color"][i]:
                        c1 -= weight(i)
                    else:
                        c0 -= weight(i)
            elif isinstance(op, Insert):
                m += 1
                s = op.state
                if s.am_active:
                    w = 1 << max(s.to_recruit, 0)
                    c1, c0 = (c1 + w, c0) if s.color else (c1, c0 + w)
            elif isinstance(op, Modify) and op.handle in idx:
                i = idx[op.handle]
                if cols["am_active"][i]:
                    if cols["color"][i]:
                        c1 -= weight(i)
                    else:
                        c0 -= weight(i)
                s = op.state
                if s.am_active:
                    w = 1 << max(s.to_recruit, 0)
                    c1, c0 = (c1 + w, c0) if s.color else (c1, c0 + w)
        return abs(m + predicted_eval_change(c0, c1, m, snap.params) - snap.params.n_target)

    def act(self, snap, budget, rng):
        best: list[AdversaryOp] = []
        best_score = self._score(snap, [])
        for name in self.TEMPLATES:
            if name == "recolor":
                ops = self._recolor(snap, budget, rng)
            else:
                ops = STRATEGIES[name]().act(snap, budget, rng)
            if not ops:
                continue
            score = self._score(snap, ops)
            if score > best_score:
                best, best_score = ops, score
        return best


STRATEGIES: dict[str, Callable[..., Strategy]] = {
    cls.name: cls
    for cls in (NullStrategy, UniformDeleter, LeaderAssassin, ColorFlooder, DesyncInserter, EvalSuppressor, AdaptiveGreedy)
}


def make_strategy(name: str, protocol: str = "main", **options: Any) -> Strategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ConfigError(f"unknown adversary strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    strategy = cls(**options)
    if protocol not in strategy.protocols:
        raise ConfigError(f"strategy {name!r} does not support protocol {protocol!r}")
    return strategy


def adversary_act(strategy: Strategy, snapshot: Snapshot, budget: int, rng: np.random.Generator) -> list[AdversaryOp]:
    """Ask ``strategy`` for this round's alterations. Budget is enforced by the engine."""
    return list(strategy.act(snapshot, budget, rng))

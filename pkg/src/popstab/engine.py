"""Round loop: adversary, matching, message exchange, agent steps, births/deaths."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import __version__
from .adversary import Delete, Insert, Modify, NullStrategy, Snapshot, Strategy, adversary_act, make_strategy
from .baselines import BaselineKernel, BaselineOptions
from .core import ConfigError, SimParams
from .protocol import ACT_DIE_CONSISTENCY, ACT_DIE_EVAL, ACT_SPLIT, MainKernel, StepResult
from .scheduler import MATCHING_MODES, matched_count, partner_indices
from .streams import RNG_ALGORITHM, numpy_generator

log = logging.getLogger(__name__)

PROTOCOLS = ("main", "attempt1", "attempt2")
MUTATIONS = ("none", "no_consistency", "split_always")
TRAJECTORY_COLUMNS = (
    "round_index",
    "size",
    "births",
    "deaths_eval",
    "deaths_consistency",
    "inserts",
    "deletes",
    "modifies",
    "violation",
)
TRAJECTORY_FORMAT = "popstab-trajectory/1"


class BudgetExceeded(RuntimeError):
    """The adversary returned more operations than its per-round budget."""


class HandleUnknown(LookupError):
    """A Delete/Modify named a handle that is not alive; the op is skipped."""


@dataclass
class RunConfig:
    params: SimParams
    seed: int = 0
    max_rounds: int = 1
    strategy: str = "null"
    strategy_options: dict[str, Any] = field(default_factory=dict)
    protocol: str = "main"
    baseline_options: BaselineOptions = field(default_factory=BaselineOptions)
    initial_size: int | None = None
    matching_mode: str = "minimal"
    mutation: str = "none"
    threads: int = 1
    stop_on_violation: bool = False
    granularity: str = "round"
    debug: bool = False
    keep_snapshots: bool = False

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be at least 1")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if self.matching_mode not in MATCHING_MODES:
            raise ConfigError(f"matching must be one of {MATCHING_MODES}")
        if self.mutation not in MUTATIONS:
            raise ConfigError(f"mutation must be one of {MUTATIONS}")
        if self.granularity not in ("round", "epoch"):
            raise ConfigError("granularity must be 'round' or 'epoch'")
        if self.initial_size is not None and self.initial_size < 0:
            raise ConfigError("initial_size must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    @property
    def initial_size_resolved(self) -> int:
        return self.params.n_target if self.initial_size is None else self.initial_size

    def echo(self) -> dict[str, Any]:
        """JSON-friendly copy of the resolved configuration."""
        p = self.params
        return {
            "n_target": p.n_target,
            "gamma": str(p.gamma),
            "adversary_budget": p.adversary_budget,
            "alpha": str(p.alpha),
            "t_inner": p.t_inner,
            "epoch_length": p.epoch_length,
            "leader_exponent": p.leader_exponent,
            "split_exponent": p.split_exponent,
            "state_count_report": p.state_count_report,
            "seed": self.seed,
            "max_rounds": self.max_rounds,
            "strategy": self.strategy,
            "strategy_options": dict(self.strategy_options),
            "protocol": self.protocol,
            "baseline_options": asdict(self.baseline_options),
            "initial_size": self.initial_size,
            "matching": self.matching_mode,
            "mutation": self.mutation,
            "granularity": self.granularity,
            "rng_algorithm": RNG_ALGORITHM,
            "version": __version__,
        }


@dataclass(slots=True)
class RoundOutcome:
    round_index: int
    population_size: int
    births: int = 0
    deaths_eval: int = 0
    deaths_consistency: int = 0
    inserts: int = 0
    deletes: int = 0
    modifies: int = 0
    violation: bool = False
    skipped_ops: int = 0

    def csv_row(self) -> str:
        return (
            f"{self.round_index},{self.population_size},{self.births},{self.deaths_eval},"
            f"{self.deaths_consistency},{self.inserts},{self.deletes},{self.modifies},{int(self.violation)}"
        )


def make_kernel(cfg: RunConfig):
    if cfg.protocol == "main":
        return MainKernel(
            cfg.params,
            consistency_check=cfg.mutation != "no_consistency",
            split_always=cfg.mutation == "split_always",
        )
    return BaselineKernel(cfg.params, cfg.protocol, cfg.baseline_options)


class Population:
    """Live agents stored column-wise, ordered by (never reused) handle.

    Ghost columns (cluster id, adversary flag, birth round) are observer-side
    bookkeeping and are never passed to the kernel.
    """

    def __init__(self, kernel, size: int):
        self.kernel = kernel
        self.cols = kernel.empty_columns(size)
        self.handles = np.arange(size, dtype=np.int64)
        self.cluster = np.full(size, -1, dtype=np.int64)
        self.inserted = np.zeros(size, dtype=bool)
        self.birth = np.zeros(size, dtype=np.int64)
        self.next_handle = size
        self.next_cluster = 0
        self._round_counts: dict[int, int] | None = None
        self._counts: dict[str, int] = {}

    @property
    def size(self) -> int:
        return len(self.handles)

    @property
    def round_column(self) -> str:
        return getattr(self.kernel, "round_column", "round")

    @property
    def period(self) -> int:
        return getattr(self.kernel, "period", None) or self.kernel.params.epoch_length

    def round_counts(self) -> dict[int, int]:
        if self._round_counts is None:
            values, counts = np.unique(self.cols[self.round_column], return_counts=True)
            self._round_counts = {int(v): int(c) for v, c in zip(values, counts)}
        return self._round_counts

    def round_values(self) -> np.ndarray:
        return np.fromiter(self.round_counts(), dtype=np.int64)

    def count(self, column: str) -> int:
        if column not in self._counts:
            self._counts[column] = int(np.count_nonzero(self.cols[column]))
        return self._counts[column]

    def wrong_round_count(self) -> int:
        counts = self.round_counts()
        return self.size - max(counts.values()) if counts else 0

    def changed(self, membership: bool) -> None:
        self._counts.clear()
        if membership:
            self._round_counts = None

    def advance_round_counts(self) -> None:
        if self._round_counts is not None:
            P = self.period
            self._round_counts = {(r + 1) % P: c for r, c in self._round_counts.items()}

    def index_of(self, handle: int) -> int | None:
        i = int(np.searchsorted(self.handles, handle))
        if i < self.size and self.handles[i] == handle:
            return i
        return None

    def state_of(self, handle: int):
        i = self.index_of(handle)
        if i is None:
            raise HandleUnknown(handle)
        return self.kernel.state_at(self.cols, i)

    def states(self) -> list:
        return [self.kernel.state_at(self.cols, i) for i in range(self.size)]

    def keep(self, mask: np.ndarray) -> None:
        self.cols = {k: v[mask] for k, v in self.cols.items()}
        self.handles = self.handles[mask]
        self.cluster = self.cluster[mask]
        self.inserted = self.inserted[mask]
        self.birth = self.birth[mask]

    def append(self, rows: dict[str, np.ndarray], cluster: np.ndarray, inserted: np.ndarray, birth: int) -> np.ndarray:
        n = len(cluster)
        new_handles = np.arange(self.next_handle, self.next_handle + n, dtype=np.int64)
        self.next_handle += n
        self.cols = {k: np.concatenate([v, rows[k].astype(v.dtype)]) for k, v in self.cols.items()}
        self.handles = np.concatenate([self.handles, new_handles])
        self.cluster = np.concatenate([self.cluster, cluster])
        self.inserted = np.concatenate([self.inserted, inserted])
        self.birth = np.concatenate([self.birth, np.full(n, birth, dtype=np.int64)])
        return new_handles

    def fingerprint(self) -> bytes:
        parts = [self.handles.tobytes()] + [self.cols[k].tobytes() for k in sorted(self.cols)]
        return b"".join(parts)


@dataclass
class SimulationResult:
    config: RunConfig
    trajectory: list[RoundOutcome]
    population: Population
    first_violation_round: int | None
    aborted: str | None = None
    summaries: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    wall_clock: float = 0.0


class Simulation:
    """Stateful driver; ``run_round`` executes one synchronous round."""

    def __init__(self, cfg: RunConfig, recorder=None):
        self.cfg = cfg
        self.params = cfg.params
        self.kernel = make_kernel(cfg)
        self.strategy: Strategy = make_strategy(cfg.strategy, cfg.protocol, **cfg.strategy_options)
        size = cfg.initial_size_resolved
        self.pop = Population(self.kernel, size)
        self.round_index = 0
        self.trajectory: list[RoundOutcome] = []
        self.first_violation_round: int | None = None
        self.tainted_clusters: set[int] = set()
        self.snapshots: list[Snapshot] = []
        self.recorder = recorder
        self.last_matched_pairs = 0
        self.last_stepped = False
        self.last_leader_colors = (0, 0)
        self.size_before_round = size
        self._pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- adversary -----------------------------------------------------------
    def snapshot(self) -> Snapshot:
        pop = self.pop

        def ro(a: np.ndarray) -> np.ndarray:
            v = a.view()
            v.flags.writeable = False
            return v

        return Snapshot(
            protocol=self.kernel.name,
            round_index=self.round_index,
            params=self.params,
            period=pop.period,
            round_column=pop.round_column,
            handles=ro(pop.handles),
            columns={k: ro(v) for k, v in pop.cols.items()},
            round_counts=dict(pop.round_counts()),
            history=self.trajectory,
        )

    def apply_ops(self, ops: Iterable, outcome: RoundOutcome) -> None:
        pop = self.pop
        doomed = np.zeros(pop.size, dtype=bool)
        pending_rows: list[dict[str, int]] = []
        pending_active: list[int] = []
        modified = False
        for op in ops:
            if isinstance(op, Insert):
                row = self.kernel.row(op.state)
                pending_rows.append(row)
                pending_active.append(row.get("am_active", 0))
                outcome.inserts += 1
                continue
            if not isinstance(op, (Delete, Modify)):
                raise TypeError(f"not an adversary operation: {op!r}")
            i = pop.index_of(op.handle)
            if i is None or doomed[i]:
                log.debug("round %d: %s", self.round_index, HandleUnknown(op.handle))
                outcome.skipped_ops += 1
                continue
            if pop.cluster[i] >= 0:
                self.tainted_clusters.add(int(pop.cluster[i]))
            if isinstance(op, Delete):
                doomed[i] = True
                outcome.deletes += 1
            else:
                row = self.kernel.row(op.state)
                for k, v in row.items():
                    pop.cols[k][i] = v
                pop.inserted[i] = True
                pop.cluster[i] = self._fresh_clusters(1)[0] if row.get("am_active", 0) else -1
                if pop.cluster[i] >= 0:
                    self.tainted_clusters.add(int(pop.cluster[i]))
                outcome.modifies += 1
                modified = True
        if doomed.any():
            pop.keep(~doomed)
        if pending_rows:
            rows = {k: np.array([r[k] for r in pending_rows]) for k in pop.cols}
            cluster = np.array(
                [self._fresh_clusters(1)[0] if a else -1 for a in pending_active], dtype=np.int64
            )
            self.tainted_clusters.update(int(c) for c in cluster if c >= 0)
            pop.append(rows, cluster, np.ones(len(pending_rows), dtype=bool), self.round_index)
        if doomed.any() or pending_rows or modified:
            pop.changed(membership=True)

    def _fresh_clusters(self, n: int) -> np.ndarray:
        ids = np.arange(self.pop.next_cluster, self.pop.next_cluster + n, dtype=np.int64)
        self.pop.next_cluster += n
        return ids

    # -- one round -----------------------------------------------------------
    def _step(self, partner: np.ndarray) -> StepResult:
        pop = self.pop
        args = (pop.cols, partner, self.round_index, self.cfg.seed, pop.handles)
        n = pop.size
        if self._pool is None or n < 2:
            return self.kernel.step(*args)
        chunks = self.cfg.threads
        bounds = [n * j // chunks for j in range(chunks + 1)]
        futures = [
            self._pool.submit(self.kernel.step, *args, bounds[j], bounds[j + 1])
            for j in range(chunks)
            if bounds[j] < bounds[j + 1]
        ]
        parts = [f.result() for f in futures]
        return StepResult(
            columns={k: np.concatenate([p.columns[k] for p in parts]) for k in pop.cols},
            action=np.concatenate([p.action for p in parts]),
            leaders=np.concatenate([p.leaders for p in parts]),
            recruits=(
                np.concatenate([p.recruits[0] for p in parts]),
                np.concatenate([p.recruits[1] for p in parts]),
            ),
        )

    def run_round(self) -> RoundOutcome:
        cfg = self.cfg
        pop = self.pop
        outcome = RoundOutcome(self.round_index, pop.size)
        self.size_before_round = pop.size
        self.last_leader_colors = (0, 0)

        # (1) adversary
        if not isinstance(self.strategy, NullStrategy):
            snap = self.snapshot()
            before = pop.fingerprint() if cfg.debug else None
            ops = adversary_act(
                self.strategy, snap, self.params.adversary_budget, numpy_generator(cfg.seed, self.round_index, "adversary")
            )
            if before is not None and pop.fingerprint() != before:
                raise RuntimeError(f"strategy {self.strategy.name} mutated the population")
            if len(ops) > self.params.adversary_budget:
                raise BudgetExceeded(
                    f"round {self.round_index}: {len(ops)} ops > budget {self.params.adversary_budget}"
                )
            if cfg.keep_snapshots:
                self.snapshots.append(snap)
            self.apply_ops(ops, outcome)

        if self.recorder is not None:
            self.recorder.before_step(self)

        # (2)-(5) matching, exchange, steps, births and deaths
        kernel = self.kernel
        self.last_matched_pairs = matched_count(pop.size, self.params.gamma) // 2
        self.last_stepped = kernel.needs_step(pop)
        if self.last_stepped:
            if kernel.needs_matching(pop):
                rng = numpy_generator(cfg.seed, self.round_index, "matching")
                partner = partner_indices(pop.size, self.params.gamma, rng, cfg.matching_mode)
                self.last_matched_pairs = int(np.count_nonzero(partner >= 0)) // 2
                if cfg.debug:
                    _check_partner(partner)
            else:
                partner = np.full(pop.size, -1, dtype=np.int64)
            self._apply_step(self._step(partner), outcome)
        else:
            kernel.quiet_advance(pop.cols)
            pop.advance_round_counts()

        # (6)-(7) outcome and win condition
        outcome.population_size = pop.size
        outcome.violation = not self.params.in_interval(pop.size)
        expected = (
            self.size_before_round
            + outcome.births
            - outcome.deaths_eval
            - outcome.deaths_consistency
            + outcome.inserts
            - outcome.deletes
        )
        assert expected == pop.size, f"population bookkeeping broken in round {self.round_index}"
        if outcome.violation and self.first_violation_round is None:
            self.first_violation_round = self.round_index
        self.trajectory.append(outcome)
        if self.recorder is not None:
            self.recorder.after_step(self, outcome)
        self.round_index += 1
        return outcome

    def _apply_step(self, result: StepResult, outcome: RoundOutcome) -> None:
        pop = self.pop
        action = result.action
        old_cluster = pop.cluster
        cluster = old_cluster.copy()
        if result.leaders.size:
            cluster[result.leaders] = self._fresh_clusters(result.leaders.size)
            self.tainted_clusters.update(cluster[result.leaders[pop.inserted[result.leaders]]].tolist())
            colors = result.columns["color"][result.leaders]
            self.last_leader_colors = tuple(np.bincount(colors, minlength=2).tolist())
        rec_idx, src_idx = result.recruits
        if rec_idx.size:
            cluster[rec_idx] = old_cluster[src_idx]
            self.tainted_clusters.update(cluster[rec_idx[pop.inserted[rec_idx]]].tolist())
        pop.cols = result.columns
        if "am_active" in pop.cols:
            cluster[pop.cols["am_active"] == 0] = -1
        pop.cluster = cluster

        dead = (action == ACT_DIE_EVAL) | (action == ACT_DIE_CONSISTENCY)
        split_idx = np.flatnonzero(action == ACT_SPLIT)
        outcome.deaths_eval = int(np.count_nonzero(action == ACT_DIE_EVAL))
        outcome.deaths_consistency = int(np.count_nonzero(action == ACT_DIE_CONSISTENCY))
        outcome.births = int(split_idx.size)
        membership = bool(dead.any() or split_idx.size)
        if split_idx.size:
            rows = {k: v[split_idx] for k, v in pop.cols.items()}
            daughters = (cluster[split_idx], pop.inserted[split_idx])
        if dead.any():
            keep = ~dead
            # daughter rows were copied above, before compaction
            pop.keep(keep)
        if split_idx.size:
            pop.append(rows, daughters[0], daughters[1], self.round_index)
        pop.changed(membership=membership)
        if not membership:
            pop.advance_round_counts()

    # -- whole runs ------------------------------------------------------------
    def run(self, max_rounds: int | None = None) -> SimulationResult:
        start = time.perf_counter()
        rounds = self.cfg.max_rounds if max_rounds is None else max_rounds
        aborted = None
        try:
            for _ in range(rounds):
                self.run_round()
                if self.cfg.stop_on_violation and self.first_violation_round is not None:
                    break
        except BudgetExceeded as exc:
            aborted = f"BudgetExceeded: {exc}"
            log.error(aborted)
        finally:
            self.close()
        summaries = self.recorder.finish(self) if self.recorder is not None else []
        return SimulationResult(
            config=self.cfg,
            trajectory=self.trajectory,
            population=self.pop,
            first_violation_round=self.first_violation_round,
            aborted=aborted,
            summaries=summaries,
            observations=getattr(self.recorder, "observations", []),
            wall_clock=time.perf_counter() - start,
        )


def _check_partner(partner: np.ndarray) -> None:
    matched = np.flatnonzero(partner >= 0)
    assert np.all(partner[partner[matched]] == matched), "matching is not an involution"
    assert np.all(partner[matched] != matched), "agent matched with itself"


def run_round(sim: Simulation) -> RoundOutcome:
    return sim.run_round()


def run_simulation(cfg: RunConfig, recorder=None) -> SimulationResult:
    """Run ``cfg.max_rounds`` rounds (or until abort); deterministic in (cfg, seed)."""
    return Simulation(cfg, recorder).run()


def thread_count(default: int = 1) -> int:
    """Worker cap from POPSTAB_THREADS (falls back to ``default``)."""
    value = os.environ.get("POPSTAB_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"POPSTAB_THREADS must be an integer, got {value!r}") from None


# -- output files -------------------------------------------------------------


def trajectory_csv(result: SimulationResult) -> str:
    cfg = result.config
    period = cfg.params.epoch_length if cfg.protocol == "main" else make_kernel(cfg).period
    header = f"# {TRAJECTORY_FORMAT} config={json.dumps(cfg.echo(), sort_keys=True)}"
    lines = [header, ",".join(TRAJECTORY_COLUMNS)]
    for o in result.trajectory:
        if cfg.granularity == "epoch" and (o.round_index + 1) % period and o.round_index != len(result.trajectory) - 1:
            continue
        lines.append(o.csv_row())
    return "\n".join(lines) + "\n"


def run_summary(result: SimulationResult) -> dict[str, Any]:
    traj = result.trajectory
    return {
        "format": "popstab-run-summary/1",
        "config": result.config.echo(),
        "seed": result.config.seed,
        "strategy": result.config.strategy,
        "strategy_uses_modify": make_strategy(result.config.strategy, result.config.protocol).uses_modify,
        "rounds_run": len(traj),
        "final_size": traj[-1].population_size if traj else result.population.size,
        "first_violation_round": result.first_violation_round,
        "aborted": result.aborted,
        "wall_clock_seconds": round(result.wall_clock, 3),
    }


def write_run_outputs(result: SimulationResult, outdir: str | Path, stem: str = "run") -> tuple[Path, Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}_trajectory.csv"
    json_path = out / f"{stem}_summary.json"
    csv_path.write_text(trajectory_csv(result))
    json_path.write_text(json.dumps(run_summary(result), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path

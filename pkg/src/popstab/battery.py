"""The verification battery behind ``popstab verify`` and the acceptance tests.

Each check is a function returning a CheckResult. Checks that need
simulation runs share them through a RunCache so one battery invocation
never repeats a (config, seed) run.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Callable

import numpy as np

from .analysis import (
    EpochRecorder,
    LemmaTolerances,
    LemmaResult,
    check_lemmas,
    check_round_consistency_bound,
    exact_pair_delta,
    expected_eval_delta,
)
from .core import AgentState, Message, SimParams, decode_message, encode_message, is_er, validate_and_derive
from .engine import RunConfig, Simulation, SimulationResult, trajectory_csv
from .protocol import ACT_DIE_CONSISTENCY, ACT_DIE_EVAL, ACT_SPLIT, AgentAction, MainKernel, main_step, step_with_message
from .streams import agent_keys, first_words, seed_streams

_ACT = {AgentAction.NONE: 0, AgentAction.SPLIT: ACT_SPLIT}


@dataclass
class CheckResult:
    name: str
    criterion: int | None
    passed: bool
    detail: dict[str, Any] = field(default_factory=dict)
    lemmas: list[LemmaResult] = field(default_factory=list)

    def line(self) -> str:
        tag = f"criterion {self.criterion}" if self.criterion else "extra"
        return f"[{'PASS' if self.passed else 'FAIL'}] {tag}: {self.name} {self.detail}"

    def as_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "criterion": self.criterion,
            "pass": self.passed,
            "detail": self.detail,
            "lemmas": [r.as_json() for r in self.lemmas],
        }


def params_for(n_target: int | str, **overrides: Any) -> SimParams:
    raw = {"n_target": n_target, "gamma": 1, "adversary_budget": 0, "alpha": "1/10"}
    raw.update(overrides)
    return validate_and_derive(raw)


class RunCache:
    """Memoises simulation runs by their resolved configuration."""

    def __init__(self) -> None:
        self._runs: dict[str, SimulationResult] = {}

    def run(self, cfg: RunConfig) -> SimulationResult:
        key = repr(sorted(cfg.echo().items())) + f"|{cfg.stop_on_violation}"
        if key not in self._runs:
            self._runs[key] = Simulation(cfg, EpochRecorder()).run()
        return self._runs[key]


@dataclass
class BatteryOptions:
    """Scale knobs; defaults are the acceptance-criteria settings."""

    mutation: str = "none"
    seeds: tuple[int, ...] = tuple(range(1, 11))
    stability_n: int = 2**16
    stability_epochs: int = 50
    drift_epochs: int = 20
    drift_seeds: tuple[int, ...] = tuple(range(101, 111))
    desync_n: int = 2**20
    desync_inject_epochs: int = 2
    desync_tail_epochs: int = 2
    desync_seed: int = 7
    baseline_n: int = 2**12
    baseline_rounds: int = 10**5
    coin_draws: int = 10**6
    determinism_threads: int = 4
    tolerances: LemmaTolerances = field(default_factory=LemmaTolerances)


# -- criterion 1: kernel vs scalar reference ---------------------------------


def phase_rounds(params: SimParams) -> list[int]:
    T, t = params.epoch_length, params.t_inner
    return sorted({0, 1, 2, t - 2, t - 1, t, T - 2, T - 1})


def state_classes(params: SimParams, rnd: int, reachable_only: bool = False) -> list[AgentState]:
    half = params.half_log_n
    out = []
    for act, color, rec, tr in itertools.product((0, 1), (0, 1), (0, 1), (0, half)):
        if reachable_only and rec and not act:
            continue
        out.append(AgentState(rnd, act, color, rec, tr))
    return out


def kernel_equivalence(params: SimParams, seed: int = 11) -> CheckResult:
    """Two-agent populations over all state-class pairs, kernel vs main_step."""
    kernel = MainKernel(params)
    T = params.epoch_length
    cases = mismatches = 0
    for r1 in phase_rounds(params):
        for r2 in (r1, T - 1 if r1 != T - 1 else 1):
            for s, u in itertools.product(state_classes(params, r1), state_classes(params, r2)):
                for matched in (True, False):
                    cases += 1
                    cols = kernel.empty_columns(2)
                    for i, st in enumerate((s, u)):
                        for k, v in kernel.row(st).items():
                            cols[k][i] = v
                    partner = np.array([1, 0] if matched else [-1, -1])
                    handles = np.array([0, 1], dtype=np.int64)
                    res = kernel.step(cols, partner, r1, seed, handles)
                    got = (kernel.state_at(res.columns, 0), int(res.action[0]))
                    wire = encode_message(u, T) if matched else None
                    ref_state, ref_act = main_step(s, wire, params, seed_streams(seed, r1, 0))
                    if ref_act is AgentAction.DIE:
                        ref_code = ACT_DIE_CONSISTENCY if matched and is_er(s, T) != is_er(u, T) else ACT_DIE_EVAL
                    else:
                        ref_code = _ACT[ref_act]
                    if got != (ref_state, ref_code):
                        mismatches += 1
    return CheckResult("kernel_equivalence", 1, mismatches == 0, {"cases": cases, "mismatches": mismatches})


# -- criterion 2: codec completeness -----------------------------------------


def full_message(t: AgentState, epoch_length: int) -> Message:
    return Message(encode_message(t, epoch_length), is_er(t, epoch_length), t.am_active, t.color, t.recruiting)


def codec_completeness(params: SimParams, seed: int = 5) -> CheckResult:
    """Stepping on decode(encode(t)) equals stepping on t's full 4-tuple."""
    T = params.epoch_length
    cases = mismatches = 0
    for rnd in phase_rounds(params):
        for s in state_classes(params, rnd):
            for r2 in (rnd, T - 1, 1):
                for t in state_classes(params, r2, reachable_only=True):
                    cases += 1
                    a = step_with_message(s, full_message(t, T), params, seed_streams(seed, rnd, 0))
                    b = step_with_message(s, decode_message(encode_message(t, T)), params, seed_streams(seed, rnd, 0))
                    mismatches += a != b
    return CheckResult("codec_completeness", 2, mismatches == 0, {"cases": cases, "mismatches": mismatches})


# -- criterion 3: biased coin ------------------------------------------------


def biased_coin(draws: int = 10**6, exponents: range = range(1, 13), seed: int = 3) -> CheckResult:
    """Vectorised TossBiasedCoin (all of the low ``a`` bits set) against 2^-a."""
    words = first_words(agent_keys(seed, 0, np.arange(draws, dtype=np.int64)))
    worst = 0.0
    detail = {}
    for a in exponents:
        mask = np.uint64((1 << a) - 1)
        freq = float(np.count_nonzero((words & mask) == mask)) / draws
        p = 2.0**-a
        z = (freq - p) / math.sqrt(p * (1 - p) / draws)
        worst = max(worst, abs(z))
        detail[f"a={a}"] = round(z, 2)
    return CheckResult("biased_coin", 3, worst <= 4.0, {"max_abs_z": round(worst, 2), **detail})


# -- criterion 4: exact drift identities -------------------------------------


def enumerate_pair_delta(clusters: list[tuple[int, int]], split_exponent: int) -> Fraction:
    """Brute force over every agent pair and every coin outcome."""
    colors = [c for size, c in clusters for _ in range(size)]
    total = Fraction(0)
    pairs = list(itertools.combinations(range(len(colors)), 2))
    outcomes = list(itertools.product((0, 1), repeat=split_exponent))
    for i, j in pairs:
        if colors[i] != colors[j]:
            total += -2
            continue
        splits = sum(1 for bits in outcomes if not all(bits))
        total += Fraction(2 * splits, len(outcomes))
    return total / len(pairs) if pairs else Fraction(0)


TOY_CLUSTERS = (
    [(4, 0), (4, 1), (4, 0)],
    [(3, 1), (5, 1)],
    [(6, 0), (6, 1)],
    [(1, 0), (2, 1), (3, 0), (4, 1)],
    [(12, 0)],
)


def drift_oracle() -> CheckResult:
    zero = all(
        expected_eval_delta(n // 8, n).per_pair_honest_delta == 0 for n in (2**12, 2**14, 2**16, 2**20)
    )
    agree = all(
        exact_pair_delta(c, 1 - Fraction(1, 2**a)) == enumerate_pair_delta(c, a)
        for c in TOY_CLUSTERS
        for a in (1, 2, 3)
    )
    return CheckResult("drift_oracle", 4, zero and agree, {"equilibrium_zero": zero, "enumeration_agrees": agree})


# -- criteria 5, 7, 8: null-adversary stability runs --------------------------


def stability_runs(opts: BatteryOptions, cache: RunCache) -> list[SimulationResult]:
    params = params_for(opts.stability_n)
    return [
        cache.run(RunConfig(params, seed=s, max_rounds=opts.stability_epochs * params.epoch_length, mutation=opts.mutation))
        for s in opts.seeds
    ]


def stability(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    runs = stability_runs(opts, cache)
    violations = sum(r.first_violation_round is not None for r in runs)
    return CheckResult("stability", 5, violations == 0, {"runs": len(runs), "runs_with_violation": violations})


def _null_lemmas(opts: BatteryOptions, cache: RunCache) -> tuple[list[LemmaResult], SimParams, int]:
    runs = stability_runs(opts, cache)
    params = runs[0].config.params
    per_run = [check_lemmas(r.trajectory, r.summaries, params, opts.tolerances) for r in runs]
    merged: dict[str, LemmaResult] = {}
    for results in per_run:
        for res in results:
            prev = merged.get(res.lemma_id)
            if prev is None or (prev.passed and not res.passed) or (
                res.margin is not None and prev.margin is not None and res.margin < prev.margin and prev.passed == res.passed
            ):
                merged[res.lemma_id] = res
    return list(merged.values()), params, sum(len(r.summaries) for r in runs)


def bounded_deviation(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    lemmas, params, epochs = _null_lemmas(opts, cache)
    e = next(r for r in lemmas if r.lemma_id == "e_bounded_deviation")
    return CheckResult("bounded_deviation", 7, e.status == "pass", {"epochs": epochs, "max_abs_drift": e.quantity, "bound": e.bound}, [e])


def color_counts(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    lemmas, params, epochs = _null_lemmas(opts, cache)
    d = next(r for r in lemmas if r.lemma_id == "d_color_counts")
    return CheckResult("color_counts", 8, d.status == "pass", {"epochs": epochs, "max_dev": d.quantity, "bound": d.bound}, [d])


def null_lemmas(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    """Checks (a)-(c) on the null runs; (f) and (g) are not applicable there."""
    lemmas, _, epochs = _null_lemmas(opts, cache)
    core = [r for r in lemmas if r.lemma_id in ("a_round_consistency", "b_half_active", "c_recruitment")]
    return CheckResult("null_lemmas", None, all(r.passed for r in core), {"epochs": epochs}, lemmas)


# -- criteria 6 and 12: drift sign ------------------------------------------


def _drift_means(opts: BatteryOptions, cache: RunCache, fraction: Fraction) -> tuple[list[float], list[SimulationResult]]:
    params = params_for(opts.stability_n)
    init = int(fraction * params.n_target)
    runs = [
        cache.run(
            RunConfig(params, seed=s, max_rounds=opts.drift_epochs * params.epoch_length, initial_size=init, mutation=opts.mutation)
        )
        for s in opts.drift_seeds
    ]
    return [float(np.mean([e.drift for e in r.summaries])) for r in runs], runs


def restoring_drift(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    low, _ = _drift_means(opts, cache, Fraction(3, 4))
    high, _ = _drift_means(opts, cache, Fraction(5, 4))
    n_low = sum(m > 0 for m in low)
    n_high = sum(m < 0 for m in high)
    need = math.ceil(0.9 * len(low))
    return CheckResult(
        "restoring_drift",
        6,
        n_low >= need and n_high >= need,
        {
            "seeds_positive_at_0.75N": n_low,
            "seeds_negative_at_1.25N": n_high,
            "required": need,
            "mean_drift_0.75N": round(float(np.mean(low)), 2),
            "mean_drift_1.25N": round(float(np.mean(high)), 2),
        },
    )


def equilibrium_drift(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    """At m = N the mean per-epoch drift must not differ significantly from 0."""
    runs = stability_runs(opts, cache)
    params = runs[0].config.params
    summaries = [s for r in runs for s in r.summaries]
    res = check_lemmas([], summaries, params, opts.tolerances)
    f0 = next(r for r in res if r.lemma_id == "f0_equilibrium_drift")
    return CheckResult("equilibrium_drift", 12, f0.status == "pass", {"mean_drift": f0.quantity, "bound": f0.bound}, [f0])


# -- criterion 9: desync purge -----------------------------------------------


def desync_purge(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    N = opts.desync_n
    limit = math.floor(N**0.25 / 8)
    params = params_for(N, adversary_budget=max(limit, 1))
    T = params.epoch_length
    stop = opts.desync_inject_epochs
    total = stop + opts.desync_tail_epochs
    cfg = RunConfig(
        params,
        seed=opts.desync_seed,
        max_rounds=total * T,
        strategy="desync_inserter",
        strategy_options={"per_epoch_limit": limit, "stop_epoch": stop},
        mutation=opts.mutation,
    )
    run = cache.run(cfg)
    obs = run.observations
    wrong = np.array([o.wrong_round for o in obs])
    bound_res = check_round_consistency_bound(int(wrong.max()), params, opts.tolerances)
    tail = wrong[stop * T :]
    nonzero = np.flatnonzero(tail)
    settle = int(nonzero[-1]) + 1 if nonzero.size else 0
    decayed = settle < opts.desync_tail_epochs * T and tail[-1] == 0
    inserted = sum(o.inserts for o in run.trajectory)
    return CheckResult(
        "desync_purge",
        9,
        bound_res.status == "pass" and decayed and inserted > 0,
        {
            "inserted": inserted,
            "max_wrong_round": int(wrong.max()),
            "bound": bound_res.bound,
            "rounds_to_zero_after_stop": settle if decayed else None,
            "final_wrong_round": int(tail[-1]),
        },
        [bound_res],
    )


# -- criterion 10: baseline failure ------------------------------------------


def baseline_failure(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    params = params_for(opts.baseline_n)
    exits = {}
    for protocol in ("attempt2", "main"):
        runs = [
            cache.run(
                replace(
                    RunConfig(params, seed=s, max_rounds=opts.baseline_rounds, protocol=protocol, mutation="none"),
                    stop_on_violation=True,
                )
            )
            for s in opts.seeds
        ]
        exits[protocol] = [r.first_violation_round for r in runs]
    n2 = sum(v is not None for v in exits["attempt2"])
    nm = sum(v is not None for v in exits["main"])
    need = math.ceil(0.9 * len(opts.seeds))
    return CheckResult(
        "baseline_failure",
        10,
        n2 >= need and nm == 0,
        {"attempt2_exits": n2, "main_exits": nm, "attempt2_exit_rounds": exits["attempt2"]},
    )


# -- criterion 11: determinism -----------------------------------------------


def determinism(opts: BatteryOptions, cache: RunCache) -> CheckResult:
    params = params_for(2**12, adversary_budget=2)
    base = RunConfig(params, seed=42, max_rounds=3 * params.epoch_length, strategy="adaptive_greedy", mutation=opts.mutation)
    texts = []
    for threads in (1, opts.determinism_threads):
        texts.append(trajectory_csv(Simulation(replace(base, threads=threads)).run()))
    texts.append(trajectory_csv(Simulation(base).run()))
    same = len(set(texts)) == 1
    return CheckResult("determinism", 11, same, {"threads": [1, opts.determinism_threads], "identical": same})


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "kernel_equivalence": lambda o, c: kernel_equivalence(params_for(2**12)),
    "codec_completeness": lambda o, c: codec_completeness(params_for(2**12)),
    "biased_coin": lambda o, c: biased_coin(o.coin_draws),
    "drift_oracle": lambda o, c: drift_oracle(),
    "stability": stability,
    "restoring_drift": restoring_drift,
    "bounded_deviation": bounded_deviation,
    "color_counts": color_counts,
    "null_lemmas": null_lemmas,
    "desync_purge": desync_purge,
    "baseline_failure": baseline_failure,
    "determinism": determinism,
    "equilibrium_drift": equilibrium_drift,
}


def run_battery(
    opts: BatteryOptions | None = None,
    only: list[str] | None = None,
    cache: RunCache | None = None,
    progress: Callable[[CheckResult], None] | None = None,
) -> list[CheckResult]:
    opts = opts or BatteryOptions()
    cache = cache or RunCache()
    names = only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
    results = []
    for name in names:
        res = CHECKS[name](opts, cache)
        if progress is not None:
            progress(res)
        results.append(res)
    return results

"""Per-epoch metrics, exact drift oracles and the lemma checkers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .core import SimParams

# Constants frozen from null-adversary calibration runs at N = 2^16
# (seeds 1000-1009, 50 epochs each; see scripts/calibrate.py): the largest
# observed value plus five RMS deviations, normalised and rounded up. Drift
# has a chi-square-like tail (it grows with the squared colour imbalance),
# so a plain 5-sigma band would be too tight.
C_DEV = 6.66e-4
C_COLOR = 2.08
# Round-consistency bound multiplier and additive slack; not calibrated
# because null runs never desynchronise.
C_ROUND = 1.0
ROUND_SLACK = 0


@dataclass(slots=True)
class RoundObservation:
    """What the recorder saw in one round (pre-step unless noted)."""

    round_index: int
    size: int
    majority_round: int
    wrong_round: int
    active: int
    leaders: tuple[int, int] | None = None
    colored: tuple[int, int] | None = None
    honest_colored: int | None = None
    touched_colored: int | None = None
    matched_pairs: int | None = None
    to_recruit_nonzero: int | None = None


@dataclass(frozen=True)
class EpochSummary:
    epoch_index: int
    size_at_start: int
    size_at_end: int
    leaders_by_color: tuple[int, int]
    colored_by_color_at_eval: tuple[int, int]
    size_at_eval: int
    active_fraction_max: Fraction
    wrong_round_count_max: int
    honest_colored: int
    adversary_touched_colored: int
    matched_pairs_at_eval: int
    to_recruit_nonzero_at_eval: int
    drift: int
    births: int
    deaths_eval: int
    deaths_consistency: int
    complete: bool

    def as_row(self) -> dict[str, Any]:
        row = asdict(self)
        row["leaders_0"], row["leaders_1"] = row.pop("leaders_by_color")
        row["colored_0"], row["colored_1"] = row.pop("colored_by_color_at_eval")
        row["active_fraction_max"] = float(self.active_fraction_max)
        row["complete"] = int(self.complete)
        return row


SUMMARY_COLUMNS = (
    "epoch_index",
    "size_at_start",
    "size_at_end",
    "drift",
    "leaders_0",
    "leaders_1",
    "colored_0",
    "colored_1",
    "size_at_eval",
    "active_fraction_max",
    "wrong_round_count_max",
    "honest_colored",
    "adversary_touched_colored",
    "matched_pairs_at_eval",
    "to_recruit_nonzero_at_eval",
    "births",
    "deaths_eval",
    "deaths_consistency",
    "complete",
)


def summaries_csv(summaries: Sequence[EpochSummary], config: Mapping[str, Any] | None = None) -> str:
    head = "# popstab-epochs/1" + (f" config={json.dumps(dict(config), sort_keys=True)}" if config is not None else "")
    lines = [head, ",".join(SUMMARY_COLUMNS)]
    for s in summaries:
        row = s.as_row()
        lines.append(",".join(str(row[c]) for c in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


def summarize_epoch(
    epoch_index: int,
    period: int,
    size_at_start: int,
    outcomes: Sequence[Any],
    observations: Sequence[RoundObservation],
) -> EpochSummary:
    """Fold one epoch's per-round data into an EpochSummary.

    ``outcomes`` and ``observations`` cover the same rounds. The summary is
    flagged incomplete when fewer than ``period`` rounds are present or no
    evaluation round was observed.
    """
    leaders = next((o.leaders for o in observations if o.leaders is not None), (0, 0))
    ev = next((o for o in observations if o.colored is not None), None)
    size_at_end = outcomes[-1].population_size if outcomes else size_at_start
    frac = max((Fraction(o.active, o.size) for o in observations if o.size), default=Fraction(0))
    return EpochSummary(
        epoch_index=epoch_index,
        size_at_start=size_at_start,
        size_at_end=size_at_end,
        leaders_by_color=leaders,
        colored_by_color_at_eval=ev.colored if ev else (0, 0),
        size_at_eval=ev.size if ev else 0,
        active_fraction_max=frac,
        wrong_round_count_max=max((o.wrong_round for o in observations), default=0),
        honest_colored=ev.honest_colored if ev else 0,
        adversary_touched_colored=ev.touched_colored if ev else 0,
        matched_pairs_at_eval=ev.matched_pairs if ev else 0,
        to_recruit_nonzero_at_eval=ev.to_recruit_nonzero if ev else 0,
        drift=size_at_end - size_at_start,
        births=sum(o.births for o in outcomes),
        deaths_eval=sum(o.deaths_eval for o in outcomes),
        deaths_consistency=sum(o.deaths_consistency for o in outcomes),
        complete=len(outcomes) == period and ev is not None,
    )


class EpochRecorder:
    """Engine hook collecting the per-round observations behind EpochSummary.

    Epoch e covers global rounds [e*T, (e+1)*T). Only the main protocol has
    clusters and colours; for baselines the colour fields stay zero.
    """

    def __init__(self) -> None:
        self.observations: list[RoundObservation] = []
        self._pending: RoundObservation | None = None

    def before_step(self, sim) -> None:
        pop = sim.pop
        counts = pop.round_counts()
        majority = max(sorted(counts), key=counts.__getitem__) if counts else 0
        obs = RoundObservation(
            round_index=sim.round_index,
            size=pop.size,
            majority_round=majority,
            wrong_round=pop.wrong_round_count(),
            active=pop.count("am_active") if "am_active" in pop.cols else 0,
        )
        if sim.cfg.protocol == "main" and majority == pop.period - 1:
            cols = pop.cols
            colored = (cols["round"] == pop.period - 1) & (cols["am_active"] == 1)
            color = cols["color"][colored]
            n1 = int(np.count_nonzero(color))
            obs.colored = (int(color.size) - n1, n1)
            tainted = np.fromiter(sim.tainted_clusters, dtype=np.int64, count=len(sim.tainted_clusters))
            cl = pop.cluster[colored]
            touched = pop.inserted[colored] | (cl < 0) | np.isin(cl, tainted)
            obs.touched_colored = int(np.count_nonzero(touched))
            obs.honest_colored = int(color.size) - obs.touched_colored
            tr = cols["to_recruit"][colored]
            obs.to_recruit_nonzero = int(np.count_nonzero((tr != 0) & ~touched))
        self._pending = obs

    def after_step(self, sim, outcome) -> None:
        obs = self._pending
        if obs.colored is not None:
            obs.matched_pairs = sim.last_matched_pairs
        if obs.majority_round == 0 and sim.cfg.protocol == "main":
            obs.leaders = sim.last_leader_colors
        self.observations.append(obs)
        self._pending = None

    def finish(self, sim) -> list[EpochSummary]:
        return epoch_summaries(sim.trajectory, self.observations, sim.pop.period, sim.cfg.initial_size_resolved)


def epoch_summaries(
    trajectory: Sequence[Any], observations: Sequence[RoundObservation], period: int, initial_size: int
) -> list[EpochSummary]:
    out = []
    size = initial_size
    for start in range(0, len(trajectory), period):
        outcomes = trajectory[start : start + period]
        s = summarize_epoch(start // period, period, size, outcomes, observations[start : start + period])
        out.append(s)
        size = s.size_at_end
    return out


# -- exact drift oracles ------------------------------------------------------


@dataclass(frozen=True)
class DriftPrediction:
    expected_delta: Fraction | None
    per_pair_honest_delta: Fraction | None
    honest_pair_probability: Fraction | None
    defined: bool = True


def expected_eval_delta(
    m_h: int,
    n_target: int,
    gamma: Fraction | int = 1,
    matched_pairs: int | None = None,
    m_total: int | None = None,
) -> DriftPrediction:
    """Expected evaluation-round change from pairs of honest coloured agents.

    The per-pair term is 2*sqrt(N)/m_h - 16/sqrt(N). Without ``m_total`` the
    honest share of agents is taken to be 1/8, so a random pair is honest on
    both ends with probability 1/64; ``matched_pairs`` defaults to
    floor(gamma * 8 m_h / 2).
    """
    if m_h <= 0:
        return DriftPrediction(None, None, None, defined=False)
    root = math.isqrt(n_target)
    if root * root != n_target:
        raise ValueError("n_target must be a perfect square")
    per_pair = Fraction(2 * root, m_h) - Fraction(16, root)
    if m_total is None:
        p_honest = Fraction(1, 64)
        total = 8 * m_h
    else:
        if m_total < m_h or m_total < 2:
            raise ValueError("m_total must be at least max(m_h, 2)")
        p_honest = Fraction(m_h * (m_h - 1), m_total * (m_total - 1))
        total = m_total
    if matched_pairs is None:
        matched_pairs = math.floor(Fraction(gamma) * total / 2)
    return DriftPrediction(matched_pairs * p_honest * per_pair, per_pair, p_honest)


def exact_pair_delta(clusters: Sequence[tuple[int, int]], p_split: Fraction) -> Fraction:
    """Expected change for one uniformly random pair of distinct coloured agents.

    ``clusters`` lists (size, colour). Same-colour pairs contribute
    +2*p_split, different-colour pairs -2. Only colour totals matter: two
    members of one cluster always share its colour.
    """
    n = [0, 0]
    for size, color in clusters:
        if size < 0:
            raise ValueError("cluster sizes must be non-negative")
        n[int(color)] += size
    total = n[0] + n[1]
    if total < 2:
        return Fraction(0)
    pairs = total * (total - 1) // 2
    same = n[0] * (n[0] - 1) // 2 + n[1] * (n[1] - 1) // 2
    diff = n[0] * n[1]
    return (2 * Fraction(p_split) * same - 2 * diff) / pairs


def split_probability(params: SimParams) -> Fraction:
    return 1 - Fraction(1, 2**params.split_exponent)


# -- lemma checks -------------------------------------------------------------


@dataclass(frozen=True)
class LemmaTolerances:
    c_round: float = C_ROUND
    round_slack: int = ROUND_SLACK
    active_slack: float = 0.0
    c_color: float = C_COLOR
    c_dev: float = C_DEV
    dev_log_power: int = 3
    null_adversary: bool = True
    recovery_window: int | None = None
    min_epochs: int = 5
    equilibrium_z: float = 4.0
    equilibrium_band: float | None = None
    skip_first_epochs: int = 0


PASS = "pass"
FAIL = "fail"
INCONCLUSIVE = "inconclusive"
NOT_APPLICABLE = "not_applicable"


@dataclass(frozen=True)
class LemmaResult:
    lemma_id: str
    quantity: float | None
    bound: float | None
    margin: float | None
    status: str
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status in (PASS, NOT_APPLICABLE)

    def as_json(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["pass"] = self.status == PASS if self.status != NOT_APPLICABLE else None
        return d


def _upper(lemma_id: str, value: float, bound: float, detail: str = "") -> LemmaResult:
    return LemmaResult(lemma_id, value, bound, bound - value, PASS if value <= bound else FAIL, detail)


def _complete(summaries: Sequence[EpochSummary], skip: int) -> list[EpochSummary]:
    return [s for s in summaries[skip:] if s.complete]


def check_round_consistency_bound(wrong_round_max: int, params: SimParams, tol: LemmaTolerances) -> LemmaResult:
    quarter = params.n_target ** 0.25
    bound = tol.c_round * (1 + 1 / float(params.gamma)) * quarter + tol.round_slack
    return _upper("a_round_consistency", float(wrong_round_max), bound)


def check_lemmas(
    trajectory: Sequence[Any],
    summaries: Sequence[EpochSummary],
    params: SimParams,
    tolerances: LemmaTolerances = LemmaTolerances(),
) -> list[LemmaResult]:
    """Evaluate checks (a)-(g) plus the equilibrium-drift check.

    Pure function of its inputs. Statistical checks with fewer than
    ``min_epochs`` usable epochs report ``inconclusive``.
    """
    tol = tolerances
    N = params.n_target
    eps = _complete(summaries, tol.skip_first_epochs)
    results: list[LemmaResult] = []
    if not eps:
        ids = ("a_round_consistency", "b_half_active", "c_recruitment", "d_color_counts", "e_bounded_deviation",
               "f_restoring_drift", "f0_equilibrium_drift", "g_recovery")
        return [LemmaResult(i, None, None, None, INCONCLUSIVE, "no complete epochs") for i in ids]

    results.append(check_round_consistency_bound(max(s.wrong_round_count_max for s in eps), params, tol))

    results.append(_upper("b_half_active", float(max(s.active_fraction_max for s in eps)), 0.5 + tol.active_slack))

    if tol.null_adversary:
        nz = sum(s.to_recruit_nonzero_at_eval for s in eps)
        results.append(_upper("c_recruitment", float(nz), 0.0))
    else:
        results.append(LemmaResult("c_recruitment", None, 0.0, None, NOT_APPLICABLE, "adversarial run"))

    color_bound = tol.c_color * N**0.75
    dev = max(abs(c - Fraction(s.size_at_eval, 16)) for s in eps for c in s.colored_by_color_at_eval)
    results.append(_upper("d_color_counts", float(dev), color_bound, "max |colored_b - m/16|"))

    dev_bound = tol.c_dev * math.sqrt(N) * math.log2(N) ** tol.dev_log_power
    results.append(_upper("e_bounded_deviation", float(max(abs(s.drift) for s in eps)), dev_bound, "max |drift|"))

    results.append(_restoring_drift(eps, params, tol))
    results.append(_equilibrium_drift(eps, params, tol))
    results.append(_recovery(eps, params, tol))
    return results


def _inner(params: SimParams) -> tuple[Fraction, Fraction]:
    half = params.alpha / 2
    return (1 - half) * params.n_target, (1 + half) * params.n_target


def _restoring_drift(eps: list[EpochSummary], params: SimParams, tol: LemmaTolerances) -> LemmaResult:
    lo, hi = _inner(params)
    below = [s.drift for s in eps if s.size_at_start < lo]
    above = [s.drift for s in eps if s.size_at_start > hi]
    if not below and not above:
        return LemmaResult("f_restoring_drift", None, None, None, NOT_APPLICABLE, "no epoch started outside the inner band")
    parts, status, quantity = [], PASS, None
    for name, drifts, sign in (("below", below, 1), ("above", above, -1)):
        if not drifts:
            continue
        if len(drifts) < tol.min_epochs:
            status = INCONCLUSIVE if status == PASS else status
            parts.append(f"{name}: {len(drifts)} epochs < {tol.min_epochs}")
            continue
        mean = float(np.mean(drifts))
        quantity = mean if quantity is None else quantity
        ok = sign * mean > 0
        if not ok:
            status = FAIL
        parts.append(f"{name}: mean drift {mean:+.2f} over {len(drifts)} epochs")
    return LemmaResult("f_restoring_drift", quantity, 0.0, quantity, status, "; ".join(parts))


def _equilibrium_drift(eps: list[EpochSummary], params: SimParams, tol: LemmaTolerances) -> LemmaResult:
    """Mean drift of epochs starting inside the inner band must be indistinguishable from 0."""
    lo, hi = _inner(params)
    drifts = [s.drift for s in eps if lo <= s.size_at_start <= hi]
    if len(drifts) < max(tol.min_epochs, 2):
        return LemmaResult("f0_equilibrium_drift", None, None, None, INCONCLUSIVE, f"{len(drifts)} epochs in band")
    mean = float(np.mean(drifts))
    if tol.equilibrium_band is not None:
        bound = tol.equilibrium_band
    else:
        bound = tol.equilibrium_z * float(np.std(drifts, ddof=1)) / math.sqrt(len(drifts))
    status = PASS if abs(mean) <= bound else FAIL
    return LemmaResult("f0_equilibrium_drift", mean, bound, bound - abs(mean), status, f"{len(drifts)} epochs")


def _recovery(eps: list[EpochSummary], params: SimParams, tol: LemmaTolerances) -> LemmaResult:
    window = tol.recovery_window or max(1, math.ceil(params.n_target**0.01))
    lo, hi = _inner(params)
    inside = [lo <= s.size_at_start <= hi for s in eps] + [lo <= eps[-1].size_at_end <= hi]
    starts = [i for i in range(len(eps)) if not inside[i] and (i == 0 or inside[i - 1])]
    if not starts:
        return LemmaResult("g_recovery", None, float(window), None, NOT_APPLICABLE, "never left the inner band")
    worst = 0
    for i in starts:
        back = next((j - i for j in range(i + 1, len(inside)) if inside[j]), None)
        if back is None:
            if len(inside) - 1 - i < window:
                return LemmaResult("g_recovery", None, float(window), None, INCONCLUSIVE, "run ended inside the window")
            return LemmaResult("g_recovery", None, float(window), None, FAIL, f"no return after epoch {i}")
        worst = max(worst, back)
    return _upper("g_recovery", float(worst), float(window), "epochs until return")


def lemma_report(results: Sequence[LemmaResult], config: Mapping[str, Any] | None = None) -> str:
    """JSON list of lemma results, wrapped with the run config when given."""
    body: Any = [r.as_json() for r in results]
    if config is not None:
        body = {"config": dict(config), "lemmas": body}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


# -- calibration --------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    c_dev: float
    c_color: float
    epochs: int
    max_abs_drift: int
    max_color_dev: float
    detail: dict[str, float] = field(default_factory=dict)


def calibrate(summaries: Sequence[EpochSummary], params: SimParams, log_power: int = 3) -> Calibration:
    """Derive c_dev and c_color from null-adversary epoch summaries."""
    eps = [s for s in summaries if s.complete]
    if len(eps) < 2:
        raise ValueError("need at least two complete epochs")
    N = params.n_target
    drift = np.array([s.drift for s in eps], dtype=float)
    color = np.array(
        [float(c - Fraction(s.size_at_eval, 16)) for s in eps for c in s.colored_by_color_at_eval]
    )
    dev_scale = math.sqrt(N) * math.log2(N) ** log_power
    color_scale = N**0.75
    c_dev = (float(np.abs(drift).max()) + 5 * float(np.sqrt(np.mean(drift**2)))) / dev_scale
    c_color = (float(np.abs(color).max()) + 5 * float(np.sqrt(np.mean(color**2)))) / color_scale
    return Calibration(
        c_dev=c_dev,
        c_color=c_color,
        epochs=len(eps),
        max_abs_drift=int(np.abs(drift).max()),
        max_color_dev=float(np.abs(color).max()),
        detail={"drift_rms": float(np.sqrt(np.mean(drift**2))), "color_rms": float(np.sqrt(np.mean(color**2)))},
    )

"""Domain types, parameter derivation and the 3-bit message codec."""

from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

MIN_LOG2_N = 12

PARAM_FILE_KEYS = ("n_target", "gamma", "adversary_budget", "alpha", "t_inner", "seed")


class ConfigError(ValueError):
    """Raised for invalid simulation parameters or config files."""


def to_fraction(value: Any, name: str) -> Fraction:
    if isinstance(value, Fraction):
        return value
    try:
        if isinstance(value, float):
            return Fraction(value).limit_denominator(10**9)
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{name}: cannot parse {value!r} as a rational") from exc


def _to_int(value: Any, name: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    text = str(value).strip()
    try:
        if text.startswith("2^") or text.startswith("2**"):
            return 2 ** int(text.split("^")[-1].split("*")[-1])
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: expected an integer, got {value!r}") from exc


@dataclass(frozen=True)
class SimParams:
    n_target: int
    gamma: Fraction
    adversary_budget: int
    alpha: Fraction
    t_inner: int
    epoch_length: int
    leader_exponent: int
    split_exponent: int
    state_count_report: int

    @property
    def log2_n(self) -> int:
        return self.n_target.bit_length() - 1

    @property
    def half_log_n(self) -> int:
        return self.log2_n // 2

    @property
    def sqrt_n(self) -> int:
        return 1 << self.half_log_n

    @property
    def lower_bound(self) -> Fraction:
        return (1 - self.alpha) * self.n_target

    @property
    def upper_bound(self) -> Fraction:
        return (1 + self.alpha) * self.n_target

    def in_interval(self, size: int) -> bool:
        return self.lower_bound <= size <= self.upper_bound

    def as_raw(self) -> dict[str, Any]:
        return {
            "n_target": self.n_target,
            "gamma": self.gamma,
            "adversary_budget": self.adversary_budget,
            "alpha": self.alpha,
            "t_inner": self.t_inner,
        }


def validate_and_derive(raw: Mapping[str, Any] | SimParams) -> SimParams:
    """Check the free parameters and fill in every derived constant.

    ``raw`` needs n_target, gamma, adversary_budget and alpha; t_inner is
    optional and defaults to log2(N)**2. Derived keys present in ``raw`` are
    ignored and recomputed.
    """
    if isinstance(raw, SimParams):
        raw = raw.as_raw()
    missing = [k for k in ("n_target", "gamma", "adversary_budget", "alpha") if k not in raw]
    if missing:
        raise ConfigError(f"missing parameters: {', '.join(missing)}")

    n = _to_int(raw["n_target"], "n_target")
    if n <= 0 or n & (n - 1):
        raise ConfigError(f"n_target must be a power of 4, got {n}")
    log2_n = n.bit_length() - 1
    if log2_n % 2:
        raise ConfigError(f"log2(n_target) must be even, got {log2_n}")
    if log2_n < MIN_LOG2_N:
        raise ConfigError(f"n_target must be at least 2^{MIN_LOG2_N}, got 2^{log2_n}")

    gamma = to_fraction(raw["gamma"], "gamma")
    if not 0 < gamma <= 1:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    alpha = to_fraction(raw["alpha"], "alpha")
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    budget = _to_int(raw["adversary_budget"], "adversary_budget")
    if budget < 0:
        raise ConfigError(f"adversary_budget must be non-negative, got {budget}")

    t_inner_raw = raw.get("t_inner")
    t_inner = log2_n * log2_n if t_inner_raw in (None, "") else _to_int(t_inner_raw, "t_inner")
    floor = log2_n * math.log2(log2_n)
    if t_inner <= floor:
        raise ConfigError(
            f"t_inner must exceed log2(N)*log2(log2(N)) = {floor:.1f}, got {t_inner}"
        )
    if t_inner < log2_n * log2_n:
        warnings.warn(
            f"t_inner={t_inner} is below log2(N)^2={log2_n * log2_n}; recruitment may not complete",
            stacklevel=2,
        )

    half = log2_n // 2
    epoch_length = t_inner * half
    return SimParams(
        n_target=n,
        gamma=gamma,
        adversary_budget=budget,
        alpha=alpha,
        t_inner=t_inner,
        epoch_length=epoch_length,
        leader_exponent=3 + half,
        split_exponent=half - 4,
        # round counter times the three protocol flags; to_recruit is analysis-only
        state_count_report=8 * epoch_length,
    )


def read_flat_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file (``#`` comments, no sections)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # type: ignore[assignment]
    text = Path(path).read_text()
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if len(parser.sections()) != 1:
        raise ConfigError(f"{path}: sections are not supported")
    return dict(parser["config"])


def write_params_file(path: str | Path, params: SimParams, seed: int) -> None:
    values = {**params.as_raw(), "seed": seed}
    lines = [f"{key} = {values[key]}" for key in PARAM_FILE_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


def read_params_file(path: str | Path) -> tuple[SimParams, int]:
    values = read_flat_config(path)
    params = validate_and_derive({k: v for k, v in values.items() if k in PARAM_FILE_KEYS})
    return params, _to_int(values.get("seed", 0), "seed")


@dataclass(frozen=True)
class AgentState:
    round: int = 0
    am_active: int = 0
    color: int = 0
    recruiting: int = 0
    to_recruit: int = 0

    def evolve(self, **changes: int) -> AgentState:
        return replace(self, **changes)


@dataclass(frozen=True)
class GhostMeta:
    """Observer-side bookkeeping; protocol code never reads it."""

    cluster_id: int | None = None
    inserted_by_adversary: bool = False
    birth_round: int = 0


def initial_agent_state() -> AgentState:
    return AgentState()


def is_er(state: AgentState, epoch_length: int) -> int:
    return int(state.round == epoch_length - 1)


@dataclass(frozen=True)
class Message:
    """A decoded neighbour message; ``None`` marks an unknown component.

    ``wire`` keeps the three transmitted bits, or is ``None`` for an absent
    neighbour, in which case every component is unknown.
    """

    wire: tuple[int, int, int] | None
    is_er: int | None
    active: int | None
    color: int | None
    recruiting: int | None

    @property
    def present(self) -> bool:
        return self.wire is not None


ABSENT = Message(None, None, None, None, None)


def encode_message(state: AgentState, epoch_length: int) -> tuple[int, int, int]:
    er = is_er(state, epoch_length)
    if er:
        return (1, state.am_active, state.color)
    if state.recruiting:
        return (0, 1, state.color)
    return (0, 0, state.am_active)


def decode_message(wire: tuple[int, int, int] | None) -> Message:
    if wire is None:
        return ABSENT
    if len(wire) != 3 or any(b not in (0, 1) for b in wire):
        raise ValueError(f"not a 3-bit message: {wire!r}")
    er, a, b = (int(x) for x in wire)
    if er:
        return Message((er, a, b), 1, a, b, None)
    if a:
        # a recruiting agent is always active
        return Message((er, a, b), 0, 1, b, 1)
    return Message((er, a, b), 0, b, None, 0)

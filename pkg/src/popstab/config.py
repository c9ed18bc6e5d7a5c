"""Flat key-value run configuration: file parsing, overrides and RunConfig assembly."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from .baselines import BaselineOptions
from .core import ConfigError, _to_int, read_flat_config, to_fraction, validate_and_derive
from .engine import RunConfig

DEFAULTS = {
    "n_target": "2^16",
    "gamma": "1",
    "adversary_budget": "0",
    "alpha": "1/10",
}

PARAM_KEYS = ("n_target", "gamma", "adversary_budget", "alpha", "t_inner")
ALIASES = {"variant": "protocol", "adversary": "strategy", "K": "adversary_budget", "N": "n_target"}
BOOL_KEYS = ("stop_on_violation", "debug", "keep_snapshots")
BASELINE_KEYS = {
    "attempt1_phase_rounds": int,
    "attempt1_shrink": float,
    "attempt1_grow": float,
    "attempt2_phase_rounds": int,
    "attempt2_c": float,
}
OTHER_KEYS = ("seed", "rounds", "epochs", "strategy", "protocol", "initial_size", "matching", "mutation", "granularity", "threads")
KNOWN = set(PARAM_KEYS) | set(BOOL_KEYS) | set(BASELINE_KEYS) | set(OTHER_KEYS)


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"empty key in {text!r}")
    return key, value.strip()


def normalise(values: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for key, value in values.items():
        key = ALIASES.get(key, key)
        if key not in KNOWN and not key.startswith(("strategy.", "grid.")):
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def load_values(path: str | Path | None, overrides: list[str] = ()) -> dict[str, str]:
    """Defaults, then the config file, then ``--set`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        try:
            values.update(normalise(read_flat_config(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(normalise(dict(parse_assignment(o) for o in overrides)))
    return values


def _bool(value: str, key: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _option(value: str) -> Any:
    try:
        return int(value)
    except ValueError:
        return value


def _initial_size(value: str, n_target: int) -> int | None:
    text = value.strip()
    if not text:
        return None
    if text.endswith("N"):
        frac = to_fraction(text[:-1].rstrip("*").strip() or "1", "initial_size")
        return int(frac * n_target)
    return _to_int(text, "initial_size")


def build_run_config(
    values: Mapping[str, str],
    seed: int | None = None,
    rounds: int | None = None,
    epochs: int | None = None,
    threads: int | None = None,
) -> RunConfig:
    """Turn resolved key-value pairs into a validated RunConfig.

    Command-line ``seed``/``rounds``/``epochs`` win over the file. With
    neither rounds nor epochs given, one epoch is run.
    """
    params = validate_and_derive({k: values[k] for k in PARAM_KEYS if k in values})
    if rounds is not None and epochs is not None:
        raise ConfigError("rounds and epochs are mutually exclusive")
    if rounds is None and epochs is None:
        if "rounds" in values and "epochs" in values:
            raise ConfigError("config sets both rounds and epochs")
        if "rounds" in values:
            rounds = _to_int(values["rounds"], "rounds")
        elif "epochs" in values:
            epochs = _to_int(values["epochs"], "epochs")
        else:
            epochs = 1
    protocol = values.get("protocol", "main")
    if rounds is None:
        if epochs < 1:
            raise ConfigError("epochs must be at least 1")
        period = params.epoch_length
        if protocol != "main":
            from .baselines import BaselineKernel

            period = BaselineKernel(params, protocol, _baseline_options(values)).period
        rounds = epochs * period
    if seed is None:
        seed = _to_int(values.get("seed", 0), "seed")
    strategy_options = {k.split(".", 1)[1]: _option(v) for k, v in values.items() if k.startswith("strategy.")}
    return RunConfig(
        params=params,
        seed=seed,
        max_rounds=rounds,
        strategy=values.get("strategy", "null"),
        strategy_options=strategy_options,
        protocol=protocol,
        baseline_options=_baseline_options(values),
        initial_size=_initial_size(values.get("initial_size", ""), params.n_target),
        matching_mode=values.get("matching", "minimal"),
        mutation=values.get("mutation", "none"),
        threads=threads if threads is not None else _to_int(values.get("threads", 1), "threads"),
        stop_on_violation=_bool(values.get("stop_on_violation", "0"), "stop_on_violation"),
        granularity=values.get("granularity", "round"),
        debug=_bool(values.get("debug", "0"), "debug"),
        keep_snapshots=_bool(values.get("keep_snapshots", "0"), "keep_snapshots"),
    )


def _baseline_options(values: Mapping[str, str]) -> BaselineOptions:
    kwargs = {}
    for key, kind in BASELINE_KEYS.items():
        if key in values and values[key] != "":
            try:
                kwargs[key] = kind(float(Fraction(values[key]))) if kind is float else _to_int(values[key], key)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{key}: bad value {values[key]!r}") from exc
    return BaselineOptions(**kwargs)


def grid_axes(values: Mapping[str, str], extra: list[str] = ()) -> dict[str, list[str]]:
    """Sweep axes from ``grid.KEY = a,b,c`` entries and ``--grid KEY=a,b,c``."""
    axes = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("grid.")}
    for item in extra:
        key, value = parse_assignment(item)
        axes[key] = value
    out = {}
    for key, text in axes.items():
        key = ALIASES.get(key, key)
        if key not in KNOWN and not key.startswith("strategy."):
            raise ConfigError(f"unknown grid key {key!r}")
        items = [x.strip() for x in text.split(",") if x.strip()]
        if not items:
            raise ConfigError(f"grid axis {key!r} is empty")
        out[key] = items
    return out

"""Scenario files: TOML schema, validation, overrides and shipped presets.

A scenario names a population, a cache, cost overrides, one policy, and
optionally a list of policies to compare and grids to sweep. Every table is
checked for unknown keys before anything runs.
"""

from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from kvadmit.controller import ControllerConfig, Policy, PolicyKind
from kvadmit.cost import CostParams
from kvadmit.errors import ConfigError
from kvadmit.workload import Distribution, PopulationConfig, expected_peak_working_set

PRESETS = ("smoke", "thrash", "ample", "sweep-sensitivity")
SWEEP_AXES = ("fixed_cap", "u_low", "u_high")

_TOP_KEYS = {"name", "seed", "horizon", "out", "population", "cache", "cost",
             "policy", "controller", "phases", "compare", "sweep"}
_CACHE_KEYS = {"capacity", "capacity_ratio", "page_size", "usage_signal"}
_POLICY_KEYS = {"kind", "cap", "offload"}
_PHASE_KEYS = {"sat_threshold", "hit_threshold", "hysteresis"}
_RUN_KEYS = {"name", "policy", "controller"}
_DIST_KEYS = {"kind", "value", "low", "high", "mean", "sigma"}
_DIST_FIELDS = ("task_tokens", "steps", "gen_tokens", "obs_tokens", "tool_latency")


@dataclass(frozen=True)
class PhaseConfig:
    sat_threshold: float = 0.8
    hit_threshold: float = 0.5
    hysteresis: int = 3


@dataclass(frozen=True)
class RunSpec:
    """One named policy inside a comparison."""

    name: str
    policy: Policy
    offload: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    horizon: float
    population: PopulationConfig
    capacity: int
    cost: CostParams
    policy: Policy
    offload: bool = False
    page_size: int = 1
    usage_signal: str = "locked"
    phases: PhaseConfig = PhaseConfig()
    out: Optional[str] = None
    compare: tuple = ()
    baseline: Optional[str] = None
    sweep: dict = field(default_factory=dict)

    def with_policy(self, policy: Policy, offload: bool = False) -> "ScenarioConfig":
        return replace(self, policy=policy, offload=offload)


def _check_keys(table: dict, allowed: set, where: str) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table, got {type(table).__name__}")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _number(value, where: str, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return kind(value)


def _distribution(value, where: str) -> Distribution:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Distribution.constant(value)
    _check_keys(value, _DIST_KEYS, where)
    args = {k: (v if k == "kind" else _number(v, f"{where}.{k}")) for k, v in value.items()}
    return Distribution(**args)


def _population(raw: dict) -> PopulationConfig:
    allowed = {f.name for f in fields(PopulationConfig)}
    _check_keys(raw, allowed, "population")
    args = {}
    for key, value in raw.items():
        if key in _DIST_FIELDS:
            args[key] = _distribution(value, f"population.{key}")
        elif key == "share_prompt":
            if not isinstance(value, bool):
                raise ConfigError("population.share_prompt: expected true/false")
            args[key] = value
        elif key == "tool_probability":
            args[key] = _number(value, f"population.{key}")
        else:
            args[key] = _number(value, f"population.{key}", int)
    return PopulationConfig(**args)


def _controller(raw: dict, where: str = "controller") -> ControllerConfig:
    allowed = {f.name for f in fields(ControllerConfig)}
    _check_keys(raw, allowed, where)
    return ControllerConfig(**{k: _number(v, f"{where}.{k}") for k, v in raw.items()})


def _policy(raw, controller: ControllerConfig, where: str = "policy") -> tuple[Policy, bool]:
    if isinstance(raw, str):
        raw = {"kind": raw}
    _check_keys(raw, _POLICY_KEYS, where)
    try:
        kind = PolicyKind(raw.get("kind", "aimd"))
    except ValueError:
        names = ", ".join(k.value for k in PolicyKind)
        raise ConfigError(f"{where}.kind: expected one of {names}") from None
    cap = raw.get("cap")
    if cap is not None:
        cap = _number(cap, f"{where}.cap", int)
    if kind in (PolicyKind.UNCONTROLLED, PolicyKind.AIMD):
        cap = None
    offload = raw.get("offload", False)
    if not isinstance(offload, bool):
        raise ConfigError(f"{where}.offload: expected true/false")
    return Policy(kind, cap=cap, config=controller), offload


def parse_scenario(raw: dict) -> ScenarioConfig:
    """Validate a decoded TOML document into a :class:`ScenarioConfig`."""
    _check_keys(raw, _TOP_KEYS, "scenario")
    if "population" not in raw or "cache" not in raw:
        raise ConfigError("scenario needs [population] and [cache] tables")
    population = _population(raw["population"])

    cache = raw["cache"]
    _check_keys(cache, _CACHE_KEYS, "cache")
    if ("capacity" in cache) == ("capacity_ratio" in cache):
        raise ConfigError("cache: give exactly one of capacity or capacity_ratio")
    if "capacity" in cache:
        capacity = _number(cache["capacity"], "cache.capacity", int)
    else:
        ratio = _number(cache["capacity_ratio"], "cache.capacity_ratio")
        if ratio <= 0:
            raise ConfigError("cache.capacity_ratio must be > 0")
        capacity = int(expected_peak_working_set(population) / ratio)
    if capacity < 1:
        raise ConfigError("cache capacity must be >= 1 slot")
    page_size = _number(cache.get("page_size", 1), "cache.page_size", int)
    if page_size < 1:
        raise ConfigError("cache.page_size must be >= 1")
    usage_signal = cache.get("usage_signal", "locked")
    if usage_signal not in ("locked", "resident"):
        raise ConfigError("cache.usage_signal: expected 'locked' or 'resident'")

    cost_raw = raw.get("cost", {})
    _check_keys(cost_raw, {f.name for f in fields(CostParams)}, "cost")
    cost = CostParams.defaults().replace(
        **{k: _number(v, f"cost.{k}") for k, v in cost_raw.items()})

    controller = _controller(raw.get("controller", {}))
    policy, offload = _policy(raw.get("policy", {}), controller)

    phases_raw = raw.get("phases", {})
    _check_keys(phases_raw, _PHASE_KEYS, "phases")
    phases = PhaseConfig(
        sat_threshold=_number(phases_raw.get("sat_threshold", 0.8), "phases.sat_threshold"),
        hit_threshold=_number(phases_raw.get("hit_threshold", 0.5), "phases.hit_threshold"),
        hysteresis=_number(phases_raw.get("hysteresis", 3), "phases.hysteresis", int),
    )
    if phases.hysteresis < 1:
        raise ConfigError("phases.hysteresis must be >= 1")

    compare_raw = raw.get("compare", {})
    _check_keys(compare_raw, {"baseline", "runs"}, "compare")
    runs = []
    for i, run in enumerate(compare_raw.get("runs", [])):
        where = f"compare.runs[{i}]"
        _check_keys(run, _RUN_KEYS, where)
        if "name" not in run:
            raise ConfigError(f"{where}: missing name")
        ctl = controller
        if "controller" in run:
            merged = {**raw.get("controller", {}), **run["controller"]}
            ctl = _controller(merged, f"{where}.controller")
        pol, off = _policy(run.get("policy", {}), ctl, f"{where}.policy")
        runs.append(RunSpec(str(run["name"]), pol, off))
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        raise ConfigError("compare.runs: names must be unique")
    baseline = compare_raw.get("baseline")
    if runs and baseline not in names:
        raise ConfigError(f"compare.baseline {baseline!r} is not one of the runs")

    sweep_raw = raw.get("sweep", {})
    _check_keys(sweep_raw, set(SWEEP_AXES), "sweep")
    sweep = {}
    for axis, grid in sweep_raw.items():
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"sweep.{axis}: expected a non-empty list")
        kind = int if axis == "fixed_cap" else float
        sweep[axis] = tuple(_number(v, f"sweep.{axis}", kind) for v in grid)

    seed = _number(raw.get("seed", 0), "seed", int)
    horizon = _number(raw.get("horizon", math.inf), "horizon")
    if horizon <= 0:
        raise ConfigError("horizon must be > 0")
    out = raw.get("out")
    return ScenarioConfig(
        name=str(raw.get("name", "scenario")), seed=seed, horizon=horizon,
        population=population, capacity=capacity, cost=cost, policy=policy,
        offload=offload, page_size=page_size, usage_signal=usage_signal,
        phases=phases, out=None if out is None else str(out),
        compare=tuple(runs), baseline=baseline, sweep=sweep,
    )


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` with ``value`` read as a TOML value, else a bare string."""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r}: expected key=value")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Return a copy of ``raw`` with dotted-key overrides applied.

    Setting a string on a key that holds a table sets that table's ``kind``,
    so ``policy=aimd`` works as a shorthand.
    """
    out = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a table")
        leaf = path[-1]
        if isinstance(value, str) and (isinstance(node.get(leaf), dict) or leaf == "policy"):
            node.setdefault(leaf, {})
            if isinstance(node[leaf], str):
                node[leaf] = {}
            node[leaf] = {**node[leaf], "kind": value}
        else:
            node[leaf] = value
    return out


def preset_path(name: str):
    return resources.files("kvadmit").joinpath(f"presets/{name}.toml")


def read_raw(source: str) -> dict:
    """Decode a scenario file, falling back to the shipped presets by name."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    else:
        stem = path.name[:-5] if path.name.endswith(".toml") else path.name
        if stem not in PRESETS or path.parent != Path("."):
            raise ConfigError(f"config {source!r} not found (presets: {', '.join(PRESETS)})")
        text = preset_path(stem).read_text()
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_scenario(source: str, overrides: Sequence[str] = ()) -> ScenarioConfig:
    return parse_scenario(apply_overrides(read_raw(source), overrides))

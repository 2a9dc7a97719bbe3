"""Reproducible populations of ReAct-style agents.

Each agent alternates generation steps with tool calls; tool observations and
generated tokens are appended to its context, so contexts only grow. All
randomness for an agent comes from its own seeded generator and is consumed in
step order, which makes the action stream independent of scheduling.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from kvadmit.errors import ConfigError

_AGENT_ID_STRIDE = 1 << 32


class InvalidState(RuntimeError):
    pass


class InvalidTransition(RuntimeError):
    pass


@dataclass(frozen=True)
class Distribution:
    """Non-negative sampling distribution.

    ``constant`` uses ``value``; ``uniform`` uses ``low``/``high``;
    ``lognormal`` uses ``mean`` (of the samples, not of the log) and ``sigma``
    (of the underlying normal).
    """

    kind: str = "constant"
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0
    mean: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if self.value < 0:
                raise ConfigError("constant value must be >= 0")
        elif self.kind == "uniform":
            if not 0 <= self.low <= self.high:
                raise ConfigError("uniform needs 0 <= low <= high")
        elif self.kind == "lognormal":
            if self.mean <= 0 or self.sigma < 0:
                raise ConfigError("lognormal needs mean > 0 and sigma >= 0")
        else:
            raise ConfigError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "Distribution":
        return cls("constant", value=value)

    @classmethod
    def uniform(cls, low: float, high: float) -> "Distribution":
        return cls("uniform", low=low, high=high)

    @classmethod
    def lognormal(cls, mean: float, sigma: float) -> "Distribution":
        return cls("lognormal", mean=mean, sigma=sigma)

    @property
    def expected(self) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return (self.low + self.high) / 2
        return self.mean

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        mu = math.log(self.mean) - self.sigma ** 2 / 2
        return float(rng.lognormal(mu, self.sigma))

    def sample_count(self, rng: np.random.Generator) -> int:
        return max(0, int(round(self.sample(rng))))


@dataclass(frozen=True)
class PopulationConfig:
    agents: int = 8
    system_prompt: int = 128
    share_prompt: bool = True
    task_tokens: Distribution = Distribution.constant(0)
    steps: Distribution = Distribution.constant(10)
    gen_tokens: Distribution = Distribution.constant(64)
    obs_tokens: Distribution = Distribution.constant(128)
    tool_latency: Distribution = Distribution.constant(1.0)
    tool_probability: float = 1.0

    def __post_init__(self):
        if self.agents < 0:
            raise ConfigError("agents must be >= 0")
        if self.system_prompt < 0:
            raise ConfigError("system_prompt must be >= 0")
        if not 0.0 <= self.tool_probability <= 1.0:
            raise ConfigError("tool_probability must be in [0, 1]")
        if self.steps.kind == "constant" and self.steps.value < 1:
            raise ConfigError("steps must be >= 1")


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    system_prompt: tuple
    task_prompt: tuple
    num_steps: int
    gen_tokens: Distribution
    obs_tokens: Distribution
    tool_latency: Distribution
    tool_probability: float
    rng_seed: tuple

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")


class AgentState(enum.Enum):
    PENDING = "pending"
    AWAITING_ADMISSION = "awaiting_admission"
    GENERATING = "generating"
    TOOL_EXECUTING = "tool_executing"
    PAUSED = "paused"
    FINISHED = "finished"


S = AgentState
LIFECYCLE = {
    S.PENDING: {S.AWAITING_ADMISSION},
    S.AWAITING_ADMISSION: {S.GENERATING, S.PAUSED},
    # a step without a tool call goes straight back to the queue
    S.GENERATING: {S.TOOL_EXECUTING, S.FINISHED, S.AWAITING_ADMISSION},
    S.TOOL_EXECUTING: {S.AWAITING_ADMISSION},
    S.PAUSED: {S.AWAITING_ADMISSION},
    S.FINISHED: set(),
}


@dataclass(frozen=True)
class EmitGeneration:
    prompt: tuple
    decode_tokens: tuple


@dataclass(frozen=True)
class EmitToolCall:
    latency: float


@dataclass(frozen=True)
class Complete:
    pass


Action = Union[EmitGeneration, EmitToolCall, Complete]


@dataclass
class AgentStats:
    tokens_generated: int = 0
    steps_done: int = 0
    prompt_tokens: int = 0
    hit_tokens: int = 0
    recompute_tokens: int = 0
    recompute_events: int = 0
    reloaded_tokens: int = 0
    wait_time: float = 0.0
    paused_count: int = 0
    finish_time: Optional[float] = None


@dataclass(eq=False)
class AgentRecord:
    spec: AgentSpec
    state: AgentState = AgentState.PENDING
    context: list = field(default_factory=list)
    step_index: int = 0
    stats: AgentStats = field(default_factory=AgentStats)
    high_water: int = 0
    transitions: list = field(default_factory=list)
    rng: Optional[np.random.Generator] = None
    script: Optional[list] = None
    drawn: list = field(default_factory=list)
    _last: Optional[str] = None
    _pending_gen: tuple = ()
    _next_token: int = 0

    def __post_init__(self):
        if not self.context:
            self.context = list(self.spec.system_prompt) + list(self.spec.task_prompt)
        if self.rng is None and self.script is None:
            self.rng = np.random.default_rng(list(self.spec.rng_seed))
        if self._next_token == 0:
            self._next_token = (self.spec.agent_id + 1) * _AGENT_ID_STRIDE + len(self.spec.task_prompt) + len(self.spec.system_prompt)

    @property
    def agent_id(self) -> int:
        return self.spec.agent_id

    def transition(self, new: AgentState, time: float = 0.0) -> None:
        if new not in LIFECYCLE[self.state]:
            raise InvalidTransition(f"agent {self.agent_id}: {self.state.value} -> {new.value}")
        self.transitions.append((time, self.state, new))
        self.state = new

    def _extend(self, tokens) -> None:
        before = len(self.context)
        self.context.extend(tokens)
        assert len(self.context) >= before

    def _fresh_tokens(self, n: int) -> tuple:
        start = self._next_token
        self._next_token += n
        return tuple(range(start, start + n))

    def _draw(self, kind: str, sample):
        if self.script is not None:
            if not self.script:
                raise InvalidState(f"agent {self.agent_id}: replay stream exhausted")
            got_kind, value = self.script.pop(0)
            if got_kind != kind:
                raise InvalidState(f"agent {self.agent_id}: replay expected {kind}, got {got_kind}")
        else:
            value = sample(self.rng)
        self.drawn.append((kind, value))
        return value

    def _emit_generation(self) -> EmitGeneration:
        n = self._draw("gen", self.spec.gen_tokens.sample_count)
        self._pending_gen = self._fresh_tokens(n)
        self._last = "gen"
        return EmitGeneration(prompt=tuple(self.context), decode_tokens=self._pending_gen)


def next_phase(agent: AgentRecord, rng: Optional[np.random.Generator] = None) -> Action:
    """Advance the agent's ReAct loop by one decision.

    Called when the agent is released, after each generation step, and after
    each tool call. ``rng`` overrides the agent's own generator.
    """
    if agent.state in (AgentState.FINISHED, AgentState.PAUSED):
        raise InvalidState(f"agent {agent.agent_id} is {agent.state.value}")
    if rng is not None:
        agent.rng = rng
    spec = agent.spec
    if agent._last is None:
        return agent._emit_generation()
    if agent._last == "gen":
        agent._extend(agent._pending_gen)
        agent.stats.tokens_generated += len(agent._pending_gen)
        agent._pending_gen = ()
        agent.step_index += 1
        if agent.step_index == spec.num_steps:
            agent._last = "done"
            return Complete()
        if spec.tool_probability >= 1.0:
            use_tool = True
        else:
            use_tool = agent._draw("tool", lambda r: bool(r.random() < spec.tool_probability))
        if use_tool:
            latency = agent._draw("latency", spec.tool_latency.sample)
            agent._last = "tool"
            return EmitToolCall(latency=latency)
        return agent._emit_generation()
    if agent._last == "tool":
        n = agent._draw("obs", spec.obs_tokens.sample_count)
        agent._extend(agent._fresh_tokens(n))
        return agent._emit_generation()
    raise InvalidState(f"agent {agent.agent_id} already complete")


def build_population(cfg: PopulationConfig, seed: int) -> list[AgentRecord]:
    """Materialize ``cfg.agents`` agents; equal seeds give equal populations."""
    shared = tuple(range(1, cfg.system_prompt + 1))
    agents = []
    for i in range(cfg.agents):
        rng = np.random.default_rng([seed, i, 0])
        num_steps = cfg.steps.sample_count(rng)
        if num_steps < 1:
            raise ConfigError(f"agent {i} sampled {num_steps} steps; steps must be >= 1")
        task_len = cfg.task_tokens.sample_count(rng)
        base = (i + 1) * _AGENT_ID_STRIDE
        if cfg.share_prompt:
            prompt = shared
        else:
            prompt = tuple(range(base, base + cfg.system_prompt))
        task = tuple(range(base + cfg.system_prompt, base + cfg.system_prompt + task_len))
        spec = AgentSpec(
            agent_id=i,
            system_prompt=prompt,
            task_prompt=task,
            num_steps=num_steps,
            gen_tokens=cfg.gen_tokens,
            obs_tokens=cfg.obs_tokens,
            tool_latency=cfg.tool_latency,
            tool_probability=cfg.tool_probability,
            rng_seed=(seed, i, 1),
        )
        agents.append(AgentRecord(spec=spec))
    return agents


def record_action_stream(population: list[AgentRecord]) -> list[list]:
    """Play every agent to completion off-line and return its drawn values.

    The population itself is left untouched.
    """
    streams = []
    for agent in population:
        probe = copy.deepcopy(agent)
        probe.state = AgentState.AWAITING_ADMISSION
        while not isinstance(next_phase(probe), Complete):
            pass
        streams.append([list(item) for item in probe.drawn])
    return streams


def with_replay(population: list[AgentRecord], streams: list[list]) -> list[AgentRecord]:
    """Fresh copies of ``population`` that read their draws from ``streams``."""
    if len(streams) != len(population):
        raise ConfigError("replay stream count does not match the population")
    out = []
    for agent, stream in zip(population, streams):
        fresh = AgentRecord(spec=agent.spec, script=[tuple(x) for x in stream])
        out.append(fresh)
    return out


def stream_hash(streams: list[list]) -> str:
    blob = json.dumps(streams, separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def final_context_length(agent: AgentRecord) -> int:
    """Length of the agent's context after its last step (off-line replay)."""
    probe = copy.deepcopy(agent)
    probe.state = AgentState.AWAITING_ADMISSION
    while not isinstance(next_phase(probe), Complete):
        pass
    return len(probe.context)


def expected_peak_working_set(cfg: PopulationConfig) -> float:
    """Distinct tokens if every agent sat at its final context at once.

    Uses distribution means; exact for constant distributions and full tool
    probability. The shared prompt counts once.
    """
    steps = cfg.steps.expected
    per_agent = (cfg.task_tokens.expected
                 + steps * cfg.gen_tokens.expected
                 + (steps - 1) * cfg.tool_probability * cfg.obs_tokens.expected)
    if cfg.share_prompt:
        return cfg.system_prompt + cfg.agents * per_agent
    return cfg.agents * (cfg.system_prompt + per_agent)

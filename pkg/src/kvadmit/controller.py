"""Agent-level admission control.

The controller is a passive state machine. Callers serialize every mutation;
reads of the window and the agent sets are safe between mutations.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from kvadmit.errors import ConfigError


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float = 2.0
    beta: float = 0.5
    u_low: float = 0.2
    u_high: float = 0.5
    h_thresh: float = 0.2
    w_min: float = 1.0
    w_max: float = 0.0            # 0 means "number of agents"
    control_interval: float = 1.0
    initial_window: float = 0.0   # 0 means w_min
    smoothing: float = 0.0        # EMA weight on the previous signal; 0 = raw

    def __post_init__(self):
        if not 0.0 <= self.u_low <= self.u_high <= 1.0:
            raise ConfigError("need 0 <= u_low <= u_high <= 1")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must be in (0, 1)")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if not 0.0 <= self.h_thresh <= 1.0:
            raise ConfigError("h_thresh must be in [0, 1]")
        if self.w_min < 1 or (self.w_max and self.w_max < self.w_min):
            raise ConfigError("need 1 <= w_min <= w_max")
        if self.control_interval <= 0:
            raise ConfigError("control_interval must be > 0")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must be in [0, 1)")


@dataclass(frozen=True)
class Signals:
    u_t: float
    h_t: float

    def __post_init__(self):
        if not (0.0 <= self.u_t <= 1.0 and 0.0 <= self.h_t <= 1.0):
            raise ValueError(f"signals out of range: {self}")


class PolicyKind(enum.Enum):
    UNCONTROLLED = "uncontrolled"
    REQUEST_CAP = "request_cap"
    AGENT_CAP = "agent_cap"
    AIMD = "aimd"


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    cap: Optional[int] = None
    config: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if self.kind in (PolicyKind.REQUEST_CAP, PolicyKind.AGENT_CAP):
            if self.cap is None or self.cap < 1:
                raise ConfigError(f"{self.kind.value} needs cap >= 1")

    @classmethod
    def uncontrolled(cls) -> "Policy":
        return cls(PolicyKind.UNCONTROLLED)

    @classmethod
    def request_cap(cls, n: int) -> "Policy":
        return cls(PolicyKind.REQUEST_CAP, cap=n)

    @classmethod
    def agent_cap(cls, n: int) -> "Policy":
        return cls(PolicyKind.AGENT_CAP, cap=n)

    @classmethod
    def aimd(cls, config: Optional[ControllerConfig] = None) -> "Policy":
        return cls(PolicyKind.AIMD, config=config or ControllerConfig())

    @property
    def agent_level(self) -> bool:
        return self.kind is not PolicyKind.REQUEST_CAP

    @property
    def label(self) -> str:
        if self.cap is not None:
            return f"{self.kind.value}({self.cap})"
        return self.kind.value


class Command(enum.Enum):
    ADMIT = "admit"
    PAUSE = "pause"
    RESUME = "resume"


class UnknownAgent(KeyError):
    pass


def update_window(window: float, cfg: ControllerConfig, signals: Signals,
                  w_max: Optional[float] = None) -> float:
    """One step of the cache-aware AIMD law, clamped to ``[w_min, w_max]``.

    Grow by ``alpha`` while the cache is under-used; cut by ``beta`` only when
    usage is high *and* hits have collapsed; otherwise hold.
    """
    if signals.u_t < cfg.u_low:
        new = window + cfg.alpha
    elif signals.u_t > cfg.u_high and signals.h_t < cfg.h_thresh:
        new = window * cfg.beta
    else:
        new = window
    upper = w_max if w_max is not None else (cfg.w_max or math.inf)
    return min(max(new, cfg.w_min), upper)


@dataclass
class ControllerState:
    window: float
    active: dict = field(default_factory=dict)      # agent id -> admission ordinal
    pending: deque = field(default_factory=deque)
    paused: deque = field(default_factory=deque)
    tick_count: int = 0


class AdmissionController:
    """Admit / pause / resume agents under one of the supported policies.

    ``num_agents`` bounds the window from above when the config leaves
    ``w_max`` unset.
    """

    def __init__(self, policy: Policy, num_agents: int):
        self.policy = policy
        cfg = policy.config
        self.w_max = float(cfg.w_max or max(num_agents, cfg.w_min))
        start = cfg.initial_window or cfg.w_min
        self.state = ControllerState(window=min(max(start, cfg.w_min), self.w_max))
        self._admissions = 0
        self._smoothed: Optional[Signals] = None

    # -- queries -------------------------------------------------------------

    @property
    def window(self) -> float:
        return self.state.window

    def limit(self) -> float:
        kind = self.policy.kind
        if kind is PolicyKind.UNCONTROLLED:
            return math.inf
        if kind is PolicyKind.AIMD:
            return math.floor(self.state.window)
        return self.policy.cap

    def is_active(self, agent_id) -> bool:
        return agent_id in self.state.active

    # -- inputs --------------------------------------------------------------

    def submit(self, agent_id) -> None:
        """An agent wants to issue its next generation step."""
        st = self.state
        if agent_id in st.active or agent_id in st.pending or agent_id in st.paused:
            raise ValueError(f"agent {agent_id} already tracked")
        st.pending.append(agent_id)

    def release(self, agent_id) -> None:
        """Request-level policies: the agent's in-flight request finished."""
        if agent_id not in self.state.active:
            raise UnknownAgent(agent_id)
        del self.state.active[agent_id]

    def on_agent_finished(self, agent_id) -> None:
        if agent_id not in self.state.active:
            raise UnknownAgent(agent_id)
        del self.state.active[agent_id]

    def observe(self, signals: Signals) -> float:
        """Feed one control tick of signals; returns the new window."""
        st = self.state
        st.tick_count += 1
        if self.policy.kind is not PolicyKind.AIMD:
            return st.window
        cfg = self.policy.config
        if cfg.smoothing and self._smoothed is not None:
            a = cfg.smoothing
            prev = self._smoothed
            signals = Signals(a * prev.u_t + (1 - a) * signals.u_t,
                              a * prev.h_t + (1 - a) * signals.h_t)
        self._smoothed = signals
        st.window = update_window(st.window, cfg, signals, self.w_max)
        return st.window

    # -- decisions -----------------------------------------------------------

    def admission_pass(self, at_boundary: Iterable = ()) -> list[tuple[Command, object]]:
        """Bring the active set in line with the current limit.

        ``at_boundary`` lists active agents that sit between steps and may be
        paused without interrupting in-flight work.
        """
        st = self.state
        limit = self.limit()
        commands: list[tuple[Command, object]] = []
        while len(st.active) < limit and (st.paused or st.pending):
            if st.paused:
                agent = st.paused.popleft()
                commands.append((Command.RESUME, agent))
            else:
                agent = st.pending.popleft()
                commands.append((Command.ADMIT, agent))
            self._admissions += 1
            st.active[agent] = self._admissions
        if len(st.active) > limit and self.policy.agent_level:
            boundary = set(at_boundary)
            newest_first = sorted(
                (a for a in st.active if a in boundary),
                key=lambda a: st.active[a], reverse=True)
            for agent in newest_first:
                if len(st.active) <= limit:
                    break
                del st.active[agent]
                st.paused.append(agent)
                commands.append((Command.PAUSE, agent))
        return commands

    def check_invariants(self, unfinished: Optional[set] = None) -> None:
        st = self.state
        cfg = self.policy.config
        active, pending, paused = set(st.active), set(st.pending), set(st.paused)
        assert len(pending) == len(st.pending) and len(paused) == len(st.paused)
        assert not (active & pending or active & paused or pending & paused)
        assert cfg.w_min <= st.window <= self.w_max
        if unfinished is not None:
            assert active | pending | paused <= unfinished
            if self.policy.agent_level:
                assert active | pending | paused == unfinished

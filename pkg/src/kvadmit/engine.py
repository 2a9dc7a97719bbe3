"""Discrete-event simulation of agentic batch inference on one accelerator.

The GPU is modeled as one resource with two modes. Prefill jobs run one at a
time, FIFO, and take priority. While no prefill is running, every resident
request decodes as one batch: each iteration emits one token per member and
costs ``decode_base + decode_context * (summed batch context)``. Decode
progress only advances in decode mode, so it is frozen during prefills and
untouched by control ticks.

Within one timestamp events are handled as: GPU and tool completions, then the
control tick, then admission checks.
"""

from __future__ import annotations

import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from kvadmit.cache import CacheTree, EvictMode
from kvadmit.controller import AdmissionController, Command, Policy, PolicyKind, Signals
from kvadmit.cost import CostParams, decode_iteration_time, prefill_time, transfer_time
from kvadmit.errors import HorizonExceeded
from kvadmit.metrics import TraceRecord
from kvadmit.workload import (
    AgentRecord,
    AgentState,
    Complete,
    EmitGeneration,
    EmitToolCall,
    build_population,
    next_phase,
    record_action_stream,
    stream_hash,
    with_replay,
)

LEDGER_KEYS = ("prefill_fresh", "prefill_recompute", "transfer", "decode", "tool_wait", "idle")
_EPS = 1e-9


class SimulationError(RuntimeError):
    pass


class EventKind(enum.IntEnum):
    # value doubles as the same-timestamp priority class
    TOOL_COMPLETE = 0
    CONTROL_TICK = 1
    ADMISSION_CHECK = 2


@dataclass(order=True, frozen=True)
class Event:
    time: float
    kind: EventKind
    ordinal: int
    agent: Optional[int] = field(default=None, compare=False)


@dataclass(eq=False)
class Request:
    agent: AgentRecord
    prompt: tuple
    decode_tokens: tuple
    enqueued: float
    path: list = field(default_factory=list)
    remaining: float = 0.0        # decode tokens still to emit
    batch_context: float = 0.0    # mean context seen while decoding


@dataclass
class Decision:
    tick: int
    time: float
    usage: float
    hit_rate: float
    window_before: float
    window_after: float
    admitted: int
    paused: int
    resumed: int


@dataclass
class SimulationResult:
    label: str
    seed: int
    makespan: float
    trace: list
    ledger: dict
    agents: list
    decisions: list
    decoded_tokens: int
    recompute_tokens: int
    evicted_tokens: int
    stalls: int
    stream_hash: str = ""
    completed: bool = True


class Engine:
    """One simulation run. Build, call :meth:`run` once, read the result."""

    def __init__(
        self,
        agents: Sequence[AgentRecord],
        capacity: int,
        cost: CostParams,
        policy: Policy,
        *,
        page_size: int = 1,
        offload: bool = False,
        usage_signal: str = "locked",
        horizon: float = math.inf,
        check: bool = False,
        seed: int = 0,
        stream_hash: str = "",
    ):
        if usage_signal not in ("locked", "resident"):
            raise ValueError(f"unknown usage signal {usage_signal!r}")
        self.agents = list(agents)
        self.by_id = {a.agent_id: a for a in self.agents}
        self.cost = cost
        self.policy = policy
        self.offload = offload
        self.usage_signal = usage_signal
        self.horizon = horizon
        self.check = check
        self.seed = seed
        self.stream_hash = stream_hash
        mode = EvictMode.OFFLOAD if offload else EvictMode.DISCARD
        self.tree = CacheTree(capacity, page_size=page_size, evict_mode=mode)
        self.controller = AdmissionController(policy, len(self.agents))
        self.interval = policy.config.control_interval

        self.now = 0.0
        self._events: list[Event] = []
        self._ordinal = 0
        self._check_pending = False
        self._queue: deque[Request] = deque()
        self._waiting: dict[int, Request] = {}      # agent id -> request not yet queued
        self._prefill: Optional[Request] = None
        self._prefill_end = 0.0
        self._prefill_parts: dict[str, float] = {}
        self._running: list[Request] = []
        self._decode_since = 0.0
        self._tools = 0
        self._unfinished = {a.agent_id for a in self.agents}
        self._tick = 0
        self._makespan = 0.0
        self._last_hit = 1.0

        self.ledger = {k: 0.0 for k in LEDGER_KEYS}
        self._accounted_to = 0.0
        self.trace: list[TraceRecord] = []
        self.decisions: list[Decision] = []
        self.decoded_tokens = 0
        self.recompute_tokens = 0
        self.stalls = 0

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: float, kind: EventKind, agent: Optional[int] = None) -> None:
        self._ordinal += 1
        heapq.heappush(self._events, Event(time, kind, self._ordinal, agent))

    def _schedule_check(self) -> None:
        if not self._check_pending:
            self._check_pending = True
            self._push(self.now, EventKind.ADMISSION_CHECK)

    def _gpu_next(self) -> Optional[float]:
        if self._prefill is not None:
            return self._prefill_end
        if self._running:
            return self._decode_since + min(r.remaining for r in self._running) * self._iteration()
        return None

    def _iteration(self) -> float:
        return decode_iteration_time(self.cost, sum(r.batch_context for r in self._running))

    # -- accounting ----------------------------------------------------------

    def _account(self, t: float) -> None:
        dt = t - self._accounted_to
        if dt <= 0:
            return
        if self._prefill is not None:
            total = sum(self._prefill_parts.values())
            for key, part in self._prefill_parts.items():
                self.ledger[key] += dt * part / total
        elif self._running:
            self.ledger["decode"] += dt
        elif self._tools:
            self.ledger["tool_wait"] += dt
        else:
            self.ledger["idle"] += dt
        self._accounted_to = t

    def _advance_decode(self) -> None:
        if self._prefill is None and self._running:
            emitted = (self.now - self._decode_since) / self._iteration()
            for r in self._running:
                r.remaining -= emitted
        self._decode_since = self.now

    # -- agent steps ---------------------------------------------------------

    def _enqueue(self, agent_id: int) -> None:
        req = self._waiting.pop(agent_id)
        self._queue.append(req)

    def _request_for(self, agent: AgentRecord, action: EmitGeneration) -> None:
        self._waiting[agent.agent_id] = Request(
            agent, action.prompt, action.decode_tokens, self.now)

    def step_generation(self, req: Request) -> None:
        """Start ``req`` on the GPU: cache lookup, prefill charge, pin."""
        tree, agent, stats = self.tree, req.agent, req.agent.stats
        ctx = len(req.prompt)
        offloaded_before = tree.offloaded_tokens
        matched, _ = tree.match_prefix(req.prompt)
        reloaded = 0
        if self.offload:
            reloaded, _ = tree.load_back(req.prompt)
        hit = matched + reloaded
        full = req.prompt + req.decode_tokens
        _, path = tree.insert_path(full)
        if path:
            tree.pin_path(path)
        req.path = path

        missing = max(0, ctx - hit)
        recompute = max(0, min(ctx, agent.high_water) - hit)
        if self.check:
            assert recompute <= agent.high_water
        prefill = prefill_time(self.cost, missing, ctx)
        moved = reloaded + tree.offloaded_tokens - offloaded_before
        transfer = 0.0
        if moved:
            concurrency = max(1, len(self._running) + 1)
            transfer = transfer_time(self.cost, moved * self.cost.bytes_per_token, concurrency)
        recompute_time = prefill * recompute / missing if missing else 0.0
        self._prefill_parts = {
            "prefill_fresh": prefill - recompute_time,
            "prefill_recompute": recompute_time,
            "transfer": transfer,
        }

        agent.high_water = max(agent.high_water, len(full))
        stats.prompt_tokens += ctx
        stats.hit_tokens += hit
        stats.reloaded_tokens += reloaded
        stats.recompute_tokens += recompute
        stats.recompute_events += recompute > 0
        stats.wait_time += self.now - req.enqueued
        self.recompute_tokens += recompute
        agent.transition(AgentState.GENERATING, self.now)
        n = len(req.decode_tokens)
        req.remaining = float(n)
        req.batch_context = ctx + (n - 1) / 2 if n else 0.0

        duration = prefill + transfer
        self._advance_decode()
        if duration > 0:
            self._prefill = req
            self._prefill_end = self.now + duration
        else:
            self._running.append(req)

    def _finish_generation(self, req: Request) -> None:
        agent = req.agent
        aid = agent.agent_id
        if req.path:
            self.tree.unpin_path(req.path)
        self.decoded_tokens += len(req.decode_tokens)
        agent.stats.steps_done += 1
        action = next_phase(agent)
        if isinstance(action, Complete):
            agent.transition(AgentState.FINISHED, self.now)
            self.tree.release(agent.context)
            agent.stats.finish_time = self.now
            self.controller.on_agent_finished(aid)
            self._unfinished.discard(aid)
            self._makespan = self.now
        elif isinstance(action, EmitToolCall):
            self.step_tool(agent, action.latency)
        else:
            agent.transition(AgentState.AWAITING_ADMISSION, self.now)
            self._request_for(agent, action)
            self._return_to_queue(aid)
        self._schedule_check()

    def step_tool(self, agent: AgentRecord, latency: float) -> None:
        """The agent's cache path is already unpinned; it waits off-GPU."""
        agent.transition(AgentState.TOOL_EXECUTING, self.now)
        self._tools += 1
        if not self.policy.agent_level:
            self.controller.release(agent.agent_id)
        self._push(self.now + latency, EventKind.TOOL_COMPLETE, agent.agent_id)

    def _return_to_queue(self, aid: int) -> None:
        if self.policy.agent_level:
            self._enqueue(aid)
        else:
            if self.controller.is_active(aid):
                self.controller.release(aid)
            self.controller.submit(aid)

    def _tool_complete(self, aid: int) -> None:
        agent = self.by_id[aid]
        self._tools -= 1
        action = next_phase(agent)
        agent.transition(AgentState.AWAITING_ADMISSION, self.now)
        self._request_for(agent, action)
        if self.policy.agent_level:
            self._enqueue(aid)
        else:
            self.controller.submit(aid)
        self._schedule_check()

    # -- GPU -----------------------------------------------------------------

    def _gpu_complete(self) -> None:
        if self._prefill is not None:
            req, self._prefill = self._prefill, None
            self._prefill_parts = {}
            self._decode_since = self.now
            self._running.append(req)
        else:
            self._advance_decode()
        done = [r for r in self._running if r.remaining <= _EPS]
        self._running = [r for r in self._running if r.remaining > _EPS]
        for r in done:
            self._finish_generation(r)
        self._dispatch()

    def _dispatch(self) -> None:
        while self._prefill is None and self._queue:
            req = self._queue[0]
            if not self.tree.can_insert(req.prompt + req.decode_tokens):
                if not self._running:
                    raise SimulationError(
                        f"agent {req.agent.agent_id}: context of "
                        f"{len(req.prompt) + len(req.decode_tokens)} tokens exceeds "
                        f"cache capacity {self.tree.pool.capacity}")
                self.stalls += 1
                return
            self._queue.popleft()
            self.step_generation(req)
            if self._prefill is None and req.remaining <= _EPS:
                self._running.remove(req)
                self._finish_generation(req)

    # -- control -------------------------------------------------------------

    def _at_boundary(self) -> set:
        return {r.agent.agent_id for r in self._queue}

    def _apply(self, commands) -> tuple[int, int, int]:
        counts = {Command.ADMIT: 0, Command.PAUSE: 0, Command.RESUME: 0}
        for cmd, aid in commands:
            counts[cmd] += 1
            agent = self.by_id[aid]
            if cmd is Command.PAUSE:
                req = next(r for r in self._queue if r.agent.agent_id == aid)
                self._queue.remove(req)
                self._waiting[aid] = req
                agent.transition(AgentState.PAUSED, self.now)
                agent.stats.paused_count += 1
            else:
                if cmd is Command.RESUME:
                    agent.transition(AgentState.AWAITING_ADMISSION, self.now)
                self._enqueue(aid)
        if self.check:
            self._check_cap()
        return counts[Command.ADMIT], counts[Command.PAUSE], counts[Command.RESUME]

    def _check_cap(self) -> None:
        ctl = self.controller
        if ctl.policy.kind is PolicyKind.UNCONTROLLED:
            return
        over = len(ctl.state.active) > ctl.limit()
        # pauses are lazy: an over-limit active set is legal only while no
        # active agent sits at a step boundary
        assert not over or not (self._at_boundary() & set(ctl.state.active))

    def _admission_check(self) -> None:
        self._check_pending = False
        self._apply(self.controller.admission_pass(self._at_boundary()))
        self._dispatch()

    def control_tick(self) -> None:
        tree, ctl = self.tree, self.controller
        raw = tree.locked_usage() if self.usage_signal == "locked" else tree.usage()
        u = min(max(raw, 0.0), 1.0)
        fresh = tree.tokens_requested > 0
        if fresh:
            self._last_hit = min(max(tree.hit_rate(), 0.0), 1.0)
        h = self._last_hit            # a tick without lookups repeats the last reading
        before = ctl.window
        if fresh:
            # react once per measurement, not once per tick of a stale one
            ctl.observe(Signals(u, h))
        admitted, paused, resumed = self._apply(ctl.admission_pass(self._at_boundary()))
        tree.reset_hit_window()
        if ctl.policy.kind is PolicyKind.UNCONTROLLED:
            window = float(len(self.agents))
        elif ctl.policy.kind is PolicyKind.AIMD:
            window = ctl.window
        else:
            window = float(ctl.policy.cap)
        transfers = int(self._prefill is not None and self._prefill_parts.get("transfer", 0) > 0)
        self.trace.append(TraceRecord.make(
            self.now, u, h, window, len(ctl.state.active),
            len(ctl.state.pending) + len(ctl.state.paused),
            self.decoded_tokens, self.recompute_tokens, transfers))
        self.decisions.append(Decision(
            self._tick, self.now, u, h, before, ctl.window, admitted, paused, resumed))
        self._tick += 1
        if self._unfinished:
            self._push(self._tick * self.interval, EventKind.CONTROL_TICK)
        self._dispatch()

    # -- main loop -----------------------------------------------------------

    def _release_all(self) -> None:
        for agent in self.agents:
            agent.transition(AgentState.AWAITING_ADMISSION, 0.0)
            action = next_phase(agent)
            self._request_for(agent, action)
            self.controller.submit(agent.agent_id)

    def _check_state(self) -> None:
        self.tree.check_invariants()
        self.controller.check_invariants(self._unfinished)
        assert self._tools >= 0

    def _result(self, completed: bool) -> SimulationResult:
        return SimulationResult(
            label=self.policy.label + ("+offload" if self.offload else ""),
            seed=self.seed,
            makespan=self._makespan if completed else self.now,
            trace=self.trace,
            ledger=dict(self.ledger),
            agents=self.agents,
            decisions=self.decisions,
            decoded_tokens=self.decoded_tokens,
            recompute_tokens=self.recompute_tokens,
            evicted_tokens=self.tree.evicted_tokens,
            stalls=self.stalls,
            stream_hash=self.stream_hash,
            completed=completed,
        )

    def run(self) -> SimulationResult:
        if not self.agents:
            return self._result(True)
        self._release_all()
        self._push(0.0, EventKind.CONTROL_TICK)
        self._schedule_check()
        while self._unfinished:
            t_gpu = self._gpu_next()
            gpu_first = t_gpu is not None and (not self._events or t_gpu <= self._events[0].time)
            t = t_gpu if gpu_first else self._events[0].time
            if t > self.horizon:
                self._account(self.horizon)
                self.now = self.horizon
                raise HorizonExceeded(
                    f"simulated clock passed the horizon of {self.horizon:g} s with "
                    f"{len(self._unfinished)} agents unfinished",
                    partial=self._result(False))
            if self.check:
                assert t >= self.now - _EPS
            self._account(t)
            self.now = max(self.now, t)
            if gpu_first:
                self._gpu_complete()
            else:
                ev = heapq.heappop(self._events)
                if ev.kind is EventKind.TOOL_COMPLETE:
                    self._tool_complete(ev.agent)
                elif ev.kind is EventKind.CONTROL_TICK:
                    self.control_tick()
                else:
                    self._admission_check()
            if self.check:
                self._check_state()
        result = self._result(True)
        if self.check:
            check_result(result)
        return result


@dataclass(frozen=True)
class Workload:
    """A recorded action stream that every policy in a comparison replays."""

    population: tuple
    streams: list
    digest: str

    @classmethod
    def record(cls, scenario) -> "Workload":
        pop = build_population(scenario.population, scenario.seed)
        streams = record_action_stream(pop)
        return cls(tuple(pop), streams, stream_hash(streams))

    def agents(self) -> list[AgentRecord]:
        return with_replay(list(self.population), self.streams)


def run(scenario, *, policy: Optional[Policy] = None, offload: Optional[bool] = None,
        workload: Optional[Workload] = None, check: bool = False) -> SimulationResult:
    """Simulate ``scenario`` (optionally under another policy) to completion."""
    workload = workload or Workload.record(scenario)
    engine = Engine(
        workload.agents(),
        scenario.capacity,
        scenario.cost,
        policy or scenario.policy,
        page_size=scenario.page_size,
        offload=scenario.offload if offload is None else offload,
        usage_signal=scenario.usage_signal,
        horizon=scenario.horizon,
        check=check,
        seed=scenario.seed,
        stream_hash=workload.digest,
    )
    return engine.run()


def check_result(result: SimulationResult) -> None:
    """End-of-run properties: ledger conservation and work conservation."""
    total = sum(result.ledger.values())
    assert abs(total - result.makespan) <= 1e-6 * max(1.0, result.makespan), (total, result.makespan)
    for agent in result.agents:
        assert agent.state is AgentState.FINISHED
        assert agent.stats.steps_done == agent.spec.num_steps
    times = [r.time for r in result.trace]
    assert all(a < b for a, b in zip(times, times[1:]))


# -- phase classification ----------------------------------------------------

class Phase(enum.Enum):
    WARMUP = "warmup"
    MIDDLE = "middle"
    COOLDOWN = "cooldown"


@dataclass(frozen=True)
class PhaseLabel:
    phase: Phase
    start: float
    end: float


def classify_phases(
    trace: Sequence[TraceRecord],
    sat_threshold: float = 0.8,
    hit_threshold: float = 0.5,
    *,
    hysteresis: int = 3,
    makespan: Optional[float] = None,
) -> list[PhaseLabel]:
    """Split ``[0, makespan]`` into warmup, thrashing middle, and cooldown.

    A tick is thrashing when usage is at least ``sat_threshold`` and the hit
    rate is below ``hit_threshold``. A thrashing stretch opens after
    ``hysteresis`` consecutive thrashing ticks and closes after as many
    consecutive healthy ones; the longest stretch is the middle phase. Without
    one, warmup ends at the first saturated tick, and a trace that never
    saturates is all warmup. Empty phases are omitted.
    """
    if hysteresis < 1:
        raise ValueError("hysteresis must be >= 1")
    end = makespan if makespan is not None else (trace[-1].time if trace else 0.0)
    if not trace:
        return [PhaseLabel(Phase.WARMUP, 0.0, end)]
    saturated = [r.usage >= sat_threshold for r in trace]
    if not any(saturated):
        return [PhaseLabel(Phase.WARMUP, 0.0, end)]
    thrashing = [s and r.hit_rate < hit_threshold for s, r in zip(saturated, trace)]
    best = None
    for lo, hi in _stretches(thrashing, hysteresis):
        t0 = trace[lo].time
        t1 = trace[hi].time if hi < len(trace) else end
        if best is None or t1 - t0 > best[1] - best[0]:
            best = (t0, t1)
    if best is None:
        split = trace[saturated.index(True)].time
        return _nonempty([PhaseLabel(Phase.WARMUP, 0.0, split),
                          PhaseLabel(Phase.COOLDOWN, split, end)])
    return _nonempty([PhaseLabel(Phase.WARMUP, 0.0, best[0]),
                      PhaseLabel(Phase.MIDDLE, best[0], best[1]),
                      PhaseLabel(Phase.COOLDOWN, best[1], end)])


def _stretches(flags: Sequence[bool], k: int):
    """Index ranges ``[lo, hi)`` opened by k true flags and closed by k false."""
    inside, run, lo = False, 0, 0
    for i, flag in enumerate(flags):
        if flag != inside:
            run += 1
            if run == k:
                if inside:
                    yield lo, i - k + 1
                else:
                    lo = i - k + 1
                inside, run = not inside, 0
        else:
            run = 0
    if inside:
        yield lo, len(flags)


def _nonempty(labels: list[PhaseLabel]) -> list[PhaseLabel]:
    kept = [p for p in labels if p.end > p.start]
    return kept or [labels[0]]


def check_partition(labels: Sequence[PhaseLabel], makespan: float) -> None:
    order = [Phase.WARMUP, Phase.MIDDLE, Phase.COOLDOWN]
    assert labels and labels[0].start == 0.0
    assert abs(labels[-1].end - makespan) <= 1e-9 * max(1.0, makespan)
    for a, b in zip(labels, labels[1:]):
        assert a.end == b.start
        assert order.index(a.phase) < order.index(b.phase)

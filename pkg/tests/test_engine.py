import dataclasses
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvadmit.config import load_scenario
from kvadmit.controller import ControllerConfig, Policy
from kvadmit.cost import CostParams
from kvadmit.engine import (
    Engine,
    Phase,
    SimulationError,
    Workload,
    check_partition,
    classify_phases,
    run,
)
from kvadmit.errors import HorizonExceeded
from kvadmit.metrics import TraceRecord
from kvadmit.workload import AgentRecord, Distribution, PopulationConfig, build_population

from oracles import decode_time_bruteforce

COST = CostParams.defaults()


def pop(seed=0, **kw):
    base = dict(agents=4, system_prompt=64, task_tokens=Distribution.constant(32),
                steps=Distribution.constant(4), gen_tokens=Distribution.constant(10),
                obs_tokens=Distribution.constant(20), tool_latency=Distribution.constant(1.5))
    base.update(kw)
    return build_population(PopulationConfig(**base), seed)


def simulate(agents, capacity=100_000, policy=None, **kw):
    return Engine(agents, capacity, COST, policy or Policy.uncontrolled(), check=True, **kw).run()


def hand_makespan(prompt, steps, gen, obs, latency):
    """Closed-form single-agent run with a cache that never evicts."""
    total, ctx, cached = 0.0, prompt, 0
    for step in range(steps):
        new = ctx - cached
        total += COST.prefill_linear * new + COST.prefill_quadratic * new * ctx
        total += decode_time_bruteforce(COST, gen, ctx)
        cached = ctx + gen
        if step < steps - 1:
            total += latency
            ctx = cached + obs
    return total


def test_single_agent_matches_closed_form():
    result = simulate(pop(agents=1))
    assert result.makespan == pytest.approx(hand_makespan(96, 4, 10, 20, 1.5), rel=1e-9)
    assert result.recompute_tokens == 0


def test_zero_tool_latency():
    result = simulate(pop(agents=1, tool_latency=Distribution.constant(0.0)))
    assert result.makespan == pytest.approx(hand_makespan(96, 4, 10, 20, 0.0), rel=1e-9)
    again = simulate(pop(agents=1, tool_latency=Distribution.constant(0.0)))
    assert again.trace == result.trace


def test_empty_population():
    result = simulate([])
    assert result.makespan == 0
    assert result.trace == []


def test_fully_cached_context_has_no_recompute():
    result = simulate(pop(agents=8))
    assert result.recompute_tokens == 0
    assert result.ledger["prefill_recompute"] == 0


def test_prefix_evicted_during_tool_is_recomputed_in_full():
    agents = build_population(PopulationConfig(
        agents=2, system_prompt=100, share_prompt=False, steps=Distribution.constant(6),
        gen_tokens=Distribution.constant(10), obs_tokens=Distribution.constant(50),
        tool_latency=Distribution.constant(1.0)), seed=0)
    slow = dataclasses.replace(agents[0].spec, num_steps=2,
                               tool_latency=Distribution.constant(100.0))
    agents[0] = AgentRecord(spec=slow)
    result = simulate(agents, capacity=420)
    a = result.agents[0]
    assert a.stats.recompute_events == 1
    assert a.stats.recompute_tokens == 110        # everything it ever had cached


def test_shared_prompt_is_reused_across_agents():
    def first_agent_hits(share):
        agents = pop(agents=2, steps=Distribution.constant(1), share_prompt=share)
        result = simulate(agents, policy=Policy.agent_cap(1))
        return result.agents[1].stats.hit_tokens
    assert first_agent_hits(True) >= 64
    assert first_agent_hits(False) == 0


def test_same_seed_same_trace():
    a = simulate(pop(seed=3, agents=6), capacity=500, policy=Policy.aimd())
    b = simulate(pop(seed=3, agents=6), capacity=500, policy=Policy.aimd())
    assert a.trace == b.trace
    assert a.ledger == b.ledger


def test_uncontrolled_ignores_tick_cadence():
    scenario = load_scenario("smoke")
    work = Workload.record(scenario)
    results = []
    for interval in (1.0, 0.5):
        pol = Policy.uncontrolled()
        pol = dataclasses.replace(pol, config=ControllerConfig(control_interval=interval))
        results.append(run(scenario, policy=pol, workload=work))
    assert results[0].makespan == results[1].makespan
    assert results[0].recompute_tokens == results[1].recompute_tokens


def test_two_agent_walkthrough():
    scenario = load_scenario("smoke")
    work = Workload.record(scenario)
    free = run(scenario, policy=Policy.uncontrolled(), workload=work, check=True)
    assert all(a.stats.recompute_events >= 1 for a in free.agents)
    capped = run(scenario, policy=Policy.agent_cap(2), workload=work, check=True)
    assert capped.recompute_tokens == 0
    adaptive = run(scenario, workload=work, check=True)
    assert adaptive.recompute_tokens == 0


def test_cuts_never_admit():
    scenario = load_scenario("smoke")
    result = run(scenario, policy=Policy.aimd(ControllerConfig(control_interval=0.25)))
    for d in result.decisions:
        if d.window_after < d.window_before:
            assert d.admitted == 0 and d.resumed == 0


def test_quiet_ticks_emit_nothing():
    result = simulate(pop(agents=5))
    assert all(d.admitted == d.paused == d.resumed == 0 for d in result.decisions[1:])


def test_request_cap_bounds_generating_requests():
    result = simulate(pop(agents=6), capacity=600, policy=Policy.request_cap(2))
    assert max(r.active for r in result.trace) <= 2
    assert all(a.stats.steps_done == a.spec.num_steps for a in result.agents)


def test_horizon_abort_keeps_partial_result():
    with pytest.raises(HorizonExceeded) as info:
        Engine(pop(agents=3), 10_000, COST, Policy.uncontrolled(), horizon=2.0).run()
    partial = info.value.partial
    assert not partial.completed
    assert partial.trace and partial.trace[-1].time <= 2.0


def test_context_larger_than_cache_is_an_error():
    with pytest.raises(SimulationError):
        simulate(pop(agents=1), capacity=50)


def test_offload_moves_bytes_instead_of_recomputing():
    scenario = load_scenario("smoke")
    result = run(scenario, policy=Policy.uncontrolled(), offload=True, check=True)
    assert result.ledger["transfer"] > 0
    assert sum(a.stats.reloaded_tokens for a in result.agents) > 0


# -- phases ------------------------------------------------------------------

def trace_of(rows, dt=1.0):
    return [TraceRecord.make(i * dt, u, h, 1, 0, 0, 0, 0, 0) for i, (u, h) in enumerate(rows)]


def test_unsaturated_trace_is_all_warmup():
    labels = classify_phases(trace_of([(0.3, 0.9)] * 10), makespan=10)
    assert [(p.phase, p.start, p.end) for p in labels] == [(Phase.WARMUP, 0.0, 10)]


def test_thrash_block_becomes_middle():
    rows = [(0.5, 0.9)] * 5 + [(0.95, 0.1)] * 20 + [(0.6, 0.9)] * 5
    labels = classify_phases(trace_of(rows), makespan=30)
    assert [p.phase for p in labels] == [Phase.WARMUP, Phase.MIDDLE, Phase.COOLDOWN]
    assert (labels[1].start, labels[1].end) == (5.0, 25.0)


def test_short_blips_do_not_split_middle():
    rows = [(0.95, 0.1)] * 10 + [(0.95, 0.9)] * 2 + [(0.95, 0.1)] * 10 + [(0.3, 0.9)] * 4
    labels = classify_phases(trace_of(rows), makespan=26)
    middle = [p for p in labels if p.phase is Phase.MIDDLE]
    assert (middle[0].start, middle[0].end) == (0.0, 22.0)


def test_saturated_but_healthy_run_has_no_middle():
    rows = [(0.5, 0.9)] * 3 + [(0.9, 0.9)] * 5
    labels = classify_phases(trace_of(rows), makespan=8)
    assert [p.phase for p in labels] == [Phase.WARMUP, Phase.COOLDOWN]


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=60),
       st.integers(1, 5), st.floats(0, 5))
def test_phases_partition_the_run(rows, k, tail):
    trace = trace_of(rows)
    makespan = trace[-1].time + tail
    labels = classify_phases(trace, hysteresis=k, makespan=makespan)
    check_partition(labels, makespan)


# -- invariants under random scenarios ---------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["uncontrolled", "request", "agent", "aimd"]),
       st.floats(0.6, 3.0), st.booleans())
def test_random_scenarios_keep_invariants(seed, kind, tightness, offload):
    agents = pop(seed=seed, agents=5, steps=Distribution.uniform(1, 5),
                 gen_tokens=Distribution.lognormal(12, 0.5), obs_tokens=Distribution.uniform(0, 40),
                 tool_latency=Distribution.lognormal(1.0, 0.8), tool_probability=0.8)
    policy = {"uncontrolled": Policy.uncontrolled(), "request": Policy.request_cap(2),
              "agent": Policy.agent_cap(2), "aimd": Policy.aimd(ControllerConfig(control_interval=0.3))}[kind]
    capacity = 400 + int(math.ceil(300 / tightness))
    result = simulate(agents, capacity=capacity, policy=policy, offload=offload)
    assert all(a.stats.steps_done == a.spec.num_steps for a in result.agents)

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvadmit.controller import (
    AdmissionController,
    Command,
    ControllerConfig,
    Policy,
    Signals,
    UnknownAgent,
    update_window,
)
from kvadmit.errors import ConfigError

from oracles import window_law_by_cases

CFG = ControllerConfig(alpha=2, beta=0.5, u_low=0.2, u_high=0.5, h_thresh=0.2, w_min=1, w_max=1000)


def step(w, u, h, cfg=CFG):
    return update_window(w, cfg, Signals(u, h))


def test_additive_increase():
    assert step(10, 0.1, 0.9) == 12


def test_multiplicative_decrease():
    assert step(10, 0.6, 0.1) == 5


def test_hold_when_saturated_but_healthy():
    assert step(10, 0.6, 0.9) == 10


def test_boundary_is_strict():
    assert step(10, 0.2, 0.0) == 10
    assert step(10, 0.5, 0.0) == 10
    assert step(10, 0.6, 0.2) == 10


def test_floor_clamp():
    assert step(1.2, 0.9, 0.0) == 1


def test_ceiling_clamp():
    cfg = ControllerConfig(w_max=11)
    assert update_window(10, cfg, Signals(0.0, 1.0)) == 11


def test_grid_agrees_with_transcription():
    grid = [i / 20 for i in range(21)]
    for u in grid:
        for h in grid:
            for w in (1.0, 3.5, 10.0, 64.0):
                want = window_law_by_cases(w, u, h, 2, 0.5, 0.2, 0.5, 0.2)
                assert step(w, u, h) == min(max(want, 1), 1000)


def test_exponential_exit_from_128():
    w, ticks = 128.0, 0
    while w > 1:
        w = step(w, 1.0, 0.0)
        ticks += 1
    assert ticks == 7 == math.ceil(math.log(128 / 1, 2))


@pytest.mark.parametrize("kwargs", [
    dict(u_low=0.6, u_high=0.5),
    dict(beta=1.0),
    dict(alpha=0.0),
    dict(w_min=0.5),
    dict(w_min=4, w_max=2),
    dict(h_thresh=1.5),
])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        ControllerConfig(**kwargs)


def test_fixed_caps_need_positive_cap():
    with pytest.raises(ConfigError):
        Policy.agent_cap(0)
    with pytest.raises(ConfigError):
        Policy.request_cap(0)


def aimd(window, n_agents=10, **cfg):
    ctl = AdmissionController(Policy.aimd(ControllerConfig(initial_window=window, **cfg)), n_agents)
    return ctl


def test_window_floor_bounds_active_set():
    ctl = aimd(3.7)
    for a in range(5):
        ctl.submit(a)
    cmds = ctl.admission_pass()
    assert cmds == [(Command.ADMIT, 0), (Command.ADMIT, 1), (Command.ADMIT, 2)]
    assert len(ctl.state.active) == 3


def test_two_slot_walkthrough():
    # capacity for two agents: A3 waits until A2 finishes
    ctl = aimd(2, n_agents=3)
    for a in ("A1", "A2", "A3"):
        ctl.submit(a)
    assert [a for _, a in ctl.admission_pass()] == ["A1", "A2"]
    assert ctl.admission_pass() == []
    ctl.on_agent_finished("A2")
    assert ctl.admission_pass() == [(Command.ADMIT, "A3")]


def test_unknown_agent_finish():
    ctl = aimd(2)
    with pytest.raises(UnknownAgent):
        ctl.on_agent_finished("ghost")


def test_last_agent_drains():
    ctl = aimd(2, n_agents=1)
    ctl.submit("only")
    ctl.admission_pass()
    ctl.on_agent_finished("only")
    assert not ctl.state.active and not ctl.state.pending
    assert ctl.admission_pass() == []


def test_halved_window_does_not_refill_until_below_floor():
    ctl = aimd(4, n_agents=6)
    for a in range(6):
        ctl.submit(a)
    ctl.admission_pass()
    ctl.observe(Signals(0.9, 0.0))            # 4 -> 2, nobody at a boundary
    assert ctl.window == 2
    assert ctl.admission_pass(at_boundary=()) == []
    ctl.on_agent_finished(0)
    assert ctl.admission_pass() == []         # 3 active, limit 2
    ctl.on_agent_finished(1)
    assert ctl.admission_pass() == []         # 2 active == limit
    ctl.on_agent_finished(2)
    assert ctl.admission_pass() == [(Command.ADMIT, 4)]


def test_pause_newest_at_boundary_then_resume_first():
    ctl = aimd(4, n_agents=6)
    for a in range(6):
        ctl.submit(a)
    ctl.admission_pass()
    ctl.observe(Signals(0.9, 0.0))            # limit 2
    cmds = ctl.admission_pass(at_boundary={0, 1, 3})
    assert cmds == [(Command.PAUSE, 3), (Command.PAUSE, 1)]
    assert set(ctl.state.active) == {0, 2}
    ctl.on_agent_finished(2)
    assert ctl.admission_pass() == [(Command.RESUME, 3)]


def test_uncontrolled_admits_everything():
    ctl = AdmissionController(Policy.uncontrolled(), 50)
    for a in range(50):
        ctl.submit(a)
    assert len(ctl.admission_pass()) == 50


def test_request_cap_requeues_after_each_request():
    ctl = AdmissionController(Policy.request_cap(1), 2)
    ctl.submit("a")
    ctl.submit("b")
    assert ctl.admission_pass() == [(Command.ADMIT, "a")]
    ctl.release("a")                          # a goes to its tool
    assert ctl.admission_pass() == [(Command.ADMIT, "b")]
    ctl.submit("a")                           # back from the tool: tail of queue
    assert list(ctl.state.pending) == ["a"]


def test_agent_cap_keeps_admission_across_tools():
    ctl = AdmissionController(Policy.agent_cap(1), 2)
    ctl.submit("a")
    ctl.submit("b")
    ctl.admission_pass()
    # a's tool call does not touch the controller; b keeps waiting
    assert ctl.admission_pass(at_boundary={"a"}) == []
    assert ctl.is_active("a")


signals = st.tuples(st.floats(0, 1), st.floats(0, 1))


@settings(max_examples=200)
@given(st.lists(signals, max_size=80), st.floats(1, 64))
def test_window_stays_in_bounds(seq, start):
    ctl = aimd(start, n_agents=64)
    for u, h in seq:
        w = ctl.observe(Signals(u, h))
        assert 1 <= w <= 64


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from(["tick", "finish", "pass"]),
                          st.floats(0, 1), st.floats(0, 1)), max_size=60))
def test_sets_stay_disjoint_and_capped(events):
    ctl = aimd(2, n_agents=12)
    unfinished = set(range(12))
    for a in range(12):
        ctl.submit(a)
    for kind, u, h in events:
        if kind == "tick":
            ctl.observe(Signals(u, h))
        elif kind == "finish" and ctl.state.active:
            victim = min(ctl.state.active)
            ctl.on_agent_finished(victim)
            unfinished.discard(victim)
        else:
            ctl.admission_pass(at_boundary=set(ctl.state.active))
            assert len(ctl.state.active) <= math.floor(ctl.window)
        ctl.check_invariants(unfinished)

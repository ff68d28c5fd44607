import pytest

from faultps import chaos, metrics, sim


def test_failure_event_needs_exactly_one_trigger_and_duration():
    chaos.FailureEvent(at_step=10, down_steps=5)
    chaos.FailureEvent(at_time=1.0, down_time=0.5)
    with pytest.raises(chaos.ChaosError):
        chaos.FailureEvent(at_step=10, at_time=1.0, down_steps=5)
    with pytest.raises(chaos.ChaosError):
        chaos.FailureEvent(at_step=10)


def test_plan_must_be_sorted_per_target():
    chaos.FailurePlan.from_dicts([
        {"target": "ps", "at_step": 10, "down_steps": 5},
        {"target": "ps", "at_step": 30, "down_steps": 5},
    ])
    with pytest.raises(chaos.ChaosError):
        chaos.FailurePlan.from_dicts([
            {"target": "ps", "at_step": 30, "down_steps": 5},
            {"target": "ps", "at_step": 10, "down_steps": 5},
        ])


def _supervisor():
    s = sim.Sim(0)
    log = metrics.MetricLog("stateless", "r", 1, clock=lambda: s.now)
    trace = metrics.RunTrace(clock=lambda: s.now)
    sup = chaos.Supervisor(s, log, trace, step_time_hint=0.1)
    return s, log, trace, sup


def test_unknown_target_rejected():
    s, log, trace, sup = _supervisor()
    with pytest.raises(chaos.ChaosError):
        sup.kill("nobody")
    with pytest.raises(chaos.ChaosError):
        sup.arm(chaos.FailurePlan.from_dicts(
            [{"target": "ghost", "at_step": 1, "down_steps": 1}]))


def test_kill_and_resurrect_cycle_with_step_trigger():
    s, log, trace, sup = _supervisor()
    lives = []

    def actor():
        lives.append("up")
        while True:
            yield sim.Sleep(0.01)

    def respawn():
        return s.spawn(actor(), name="ps")

    sup.register_role("ps", respawn)
    sup.rebind("ps", respawn())
    sup.arm(chaos.FailurePlan.from_dicts(
        [{"target": "ps", "at_step": 5, "down_steps": 2}]))

    s.run(until=lambda: len(lives) == 1)
    sup.on_step(4)
    assert sup.is_alive("ps")
    sup.on_step(5)  # trigger fires
    assert not sup.is_alive("ps")
    assert not log.ps_alive
    s.run(until=lambda: len(lives) == 2)  # resurrect timer (2 steps x 0.1s)
    assert sup.is_alive("ps")
    assert s.now == pytest.approx(0.2, abs=0.05)
    assert lives == ["up", "up"]
    assert [e["kind"] for e in trace.events] == ["kill", "resurrect"]


def test_resurrect_of_live_target_rejected():
    s, log, trace, sup = _supervisor()

    def actor():
        while True:
            yield

    def respawn():
        return s.spawn(actor(), name="ps")

    sup.register_role("ps", respawn)
    sup.rebind("ps", respawn())
    with pytest.raises(chaos.ChaosError):
        sup.resurrect("ps")


def test_killed_actor_performs_no_further_operations():
    s, log, trace, sup = _supervisor()
    ops = []

    def actor():
        while True:
            ops.append(s.now)
            yield sim.Sleep(0.1)

    def respawn():
        return s.spawn(actor(), name="ps")

    sup.register_role("ps", respawn)
    sup.rebind("ps", respawn())
    s.run(max_time=0.55)
    count_at_kill = len(ops)
    sup.kill("ps")
    s.run(max_time=5.0)
    assert len(ops) == count_at_kill  # total kill: no operation after the kill


def test_time_trigger_fires_on_the_simulated_clock():
    s, log, trace, sup = _supervisor()

    def actor():
        while True:
            yield sim.Sleep(0.05)

    def respawn():
        return s.spawn(actor(), name="ps")

    sup.register_role("ps", respawn)
    sup.rebind("ps", respawn())
    sup.arm(chaos.FailurePlan.from_dicts(
        [{"target": "ps", "at_time": 1.0, "down_time": 0.5}]))
    s.run(until=lambda: not sup.is_alive("ps"))
    assert s.now == pytest.approx(1.0)
    s.run(until=lambda: sup.is_alive("ps"))
    assert s.now == pytest.approx(1.5)

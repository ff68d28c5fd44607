"""Scripted failure injection: kill and resurrect parameter-server actors on
step- or time-based triggers.

Step triggers fire synchronously from the victim's own update path, so the
kill lands at the victim's very next yield point regardless of how the
scheduler happens to interleave other tasks. Time triggers ride the simulated
clock. A kill closes the actor's coordination sessions (cascading ephemeral
cleanup and watches) and the killed actor performs no further operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from . import sim


class ChaosError(Exception):
    pass


@dataclass(frozen=True)
class FailureEvent:
    target: str = "ps"
    at_step: Optional[int] = None
    at_time: Optional[float] = None
    down_steps: Optional[int] = None
    down_time: Optional[float] = None

    def __post_init__(self):
        if (self.at_step is None) == (self.at_time is None):
            raise ChaosError("exactly one of at_step/at_time must be set")
        if (self.down_steps is None) == (self.down_time is None):
            raise ChaosError("exactly one of down_steps/down_time must be set")


@dataclass(frozen=True)
class FailurePlan:
    events: tuple = ()

    def __post_init__(self):
        per_target: Dict[str, list] = {}
        for ev in self.events:
            per_target.setdefault(ev.target, []).append(ev)
        for evs in per_target.values():
            steps = [e.at_step for e in evs if e.at_step is not None]
            times = [e.at_time for e in evs if e.at_time is not None]
            if steps != sorted(steps) or times != sorted(times):
                raise ChaosError("failure events must be sorted by trigger")

    @staticmethod
    def from_dicts(items: List[dict]) -> "FailurePlan":
        return FailurePlan(tuple(FailureEvent(**it) for it in items))


class _Role:
    def __init__(self, respawn: Callable[[], Optional[sim.Task]], rebindable: bool):
        self.respawn = respawn
        self.rebindable = rebindable
        self.task: Optional[sim.Task] = None
        self.alive = False
        self.incarnation = 0


class Supervisor:
    """Owns actor lifecycles; kill/resurrect are serialized per target.

    Two role styles exist. A plain role (checkpointing/stateless PS) is bound
    to one task; resurrecting it spawns the replacement and rebinds. A
    rebindable role (chain) points at whichever server currently acts as the
    frontend: promotions move the binding via rebind(), and resurrection only
    appends a fresh backup at the tail without touching the binding.
    """

    def __init__(self, simulator: sim.Sim, metric_log, trace, step_time_hint: float):
        self.sim = simulator
        self.metrics = metric_log
        self.trace = trace
        self.step_time_hint = step_time_hint
        self.roles: Dict[str, _Role] = {}
        self._pending: List[FailureEvent] = []
        self.on_kill_hooks: List[Callable[[str], None]] = []

    # -- registry -----------------------------------------------------------

    def register_role(self, name: str, respawn: Callable[[], Optional[sim.Task]],
                      rebindable: bool = False) -> None:
        self.roles[name] = _Role(respawn, rebindable)

    def rebind(self, name: str, task: sim.Task) -> None:
        role = self.roles[name]
        role.task = task
        role.alive = True
        role.incarnation += 1
        if name == "ps" and not self.metrics.ps_alive:
            self.metrics.ps_alive = True
            self.metrics.sample()

    def is_alive(self, name: str) -> bool:
        role = self.roles.get(name)
        return bool(role and role.alive and role.task and role.task.alive)

    # -- failure plan -------------------------------------------------------

    def arm(self, plan: FailurePlan) -> None:
        for ev in plan.events:
            if ev.target not in self.roles:
                raise ChaosError(f"unknown target {ev.target!r}")
            if ev.at_time is not None:
                self.sim.spawn(self._time_trigger(ev), name=f"chaos-timer-{ev.target}")
            else:
                self._pending.append(ev)

    def _time_trigger(self, ev: FailureEvent):
        yield sim.Sleep(ev.at_time - self.sim.now)
        if self.is_alive(ev.target):
            self.kill(ev.target, down_for=self._down_duration(ev))

    def on_step(self, step: int) -> None:
        """Called by the live PS after each weight update; fires due step triggers."""
        due = [ev for ev in self._pending if ev.at_step is not None and step >= ev.at_step]
        for ev in due:
            self._pending.remove(ev)
            if self.is_alive(ev.target):
                self.kill(ev.target, down_for=self._down_duration(ev))

    def _down_duration(self, ev: FailureEvent) -> float:
        if ev.down_time is not None:
            return ev.down_time
        # checkpointing strategies freeze the step counter while the PS is
        # down, so a step-denominated downtime converts through nominal step time
        return ev.down_steps * self.step_time_hint

    # -- kill / resurrect ---------------------------------------------------

    def kill(self, target: str, down_for: Optional[float] = None) -> None:
        role = self.roles.get(target)
        if role is None:
            raise ChaosError(f"unknown target {target!r}")
        if not self.is_alive(target):
            raise ChaosError(f"{target} is not alive")
        self.trace.emit("kill", target=target, step=self.metrics.sim_step)
        self.sim.kill(role.task)
        role.alive = False
        if target == "ps":
            self.metrics.ps_alive = False
            self.metrics.sample()
        for hook in self.on_kill_hooks:
            hook(target)
        if down_for is not None:
            self.sim.spawn(self._resurrect_later(target, down_for),
                           name=f"chaos-resurrect-{target}")

    def _resurrect_later(self, target: str, down_for: float):
        yield sim.Sleep(down_for)
        self.resurrect(target)

    def resurrect(self, target: str) -> None:
        role = self.roles.get(target)
        if role is None:
            raise ChaosError(f"unknown target {target!r}")
        if not role.rebindable and self.is_alive(target):
            raise ChaosError(f"{target} is already alive")
        self.trace.emit("resurrect", target=target, step=self.metrics.sim_step)
        task = role.respawn()
        if task is not None:
            role.task = task
            role.alive = True
            role.incarnation += 1
            if target == "ps" and not self.metrics.ps_alive:
                self.metrics.ps_alive = True
                self.metrics.sample()

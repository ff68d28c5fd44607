"""Deterministic cooperative task scheduler with a simulated clock.

Tasks are plain generators that yield scheduling instructions. A seeded RNG
picks which runnable task advances next, so a whole run is a pure function
of its seed and every interleaving can be replayed or re-randomized at will.
A task can be killed between any two of its yields, never mid-slice.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generator, Iterable, Optional

READY = "ready"
RUNNING = "running"
SLEEPING = "sleeping"
WAITING = "waiting"
DONE = "done"
KILLED = "killed"

TERMINAL = (DONE, KILLED)


class SimDeadlock(Exception):
    """Raised when run() is asked to wait for a condition that can no longer happen."""


@dataclass(frozen=True)
class Sleep:
    """Suspend the yielding task for `dt` simulated seconds."""

    dt: float


@dataclass(frozen=True)
class WaitTasks:
    """Suspend until tasks finish: all of them ('all') or at least one ('any')."""

    tasks: tuple
    mode: str = "all"


@dataclass(frozen=True)
class WaitQueue:
    """Suspend until the queue has at least one item."""

    queue: "Queue"


class Queue:
    """FIFO channel that wakes one blocked task per push."""

    def __init__(self, maxsize: int = 100_000):
        self.items: deque = deque()
        self.maxsize = maxsize
        self._waiters: deque = deque()

    def __len__(self) -> int:
        return len(self.items)

    def push(self, item: Any) -> None:
        if len(self.items) >= self.maxsize:
            raise OverflowError("queue overflow (notification backlog bound exceeded)")
        self.items.append(item)
        while self._waiters:
            task = self._waiters.popleft()
            if task.status == WAITING:
                task.sim._make_ready(task, resume=None)
                break


def wait_queue(q: Queue) -> Generator:
    """Generator helper: block on `q`, return the next item."""
    while not q.items:
        yield WaitQueue(q)
    return q.items.popleft()


class Task:
    def __init__(self, sim: "Sim", gen: Generator, name: str, owner: Optional["Task"]):
        self.sim = sim
        self.gen = gen
        self.name = name
        self.owner = owner
        self.tid = sim._next_id()
        self.status = READY
        self.result: Any = None
        self.kill_pending = False
        self.done_seq: Optional[int] = None
        self._resume: Any = None
        self._wait: Optional[WaitTasks] = None
        self._watchers: set = set()
        self._death_hooks: list = []
        # run when this task finishes after its owner already died; used by
        # spawners to reclaim results nobody will ever collect
        self.orphan_cleanup: Optional[Callable[[Any], None]] = None

    def on_death(self, hook: Callable[[], None]) -> None:
        """Register a hook run when the task is killed or finishes."""
        self._death_hooks.append(hook)

    @property
    def alive(self) -> bool:
        return self.status not in TERMINAL

    def __repr__(self):
        return f"<Task {self.tid} {self.name!r} {self.status}>"


class Sim:
    """Owner of the clock, the runnable set, and every spawned task."""

    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng = random.Random(seed)
        self.seq = 0
        self._ids = 0
        self._ready: list = []
        self._timers: list = []
        self._tasks: list = []
        self._current: Optional[Task] = None

    def _next_id(self) -> int:
        self._ids += 1
        return self._ids

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def spawn(self, gen: Generator, name: str = "", owner: Optional[Task] = None) -> Task:
        task = Task(self, gen, name or f"task{self._ids + 1}", owner)
        self._tasks.append(task)
        self._ready.append(task)
        return task

    @property
    def current(self) -> Optional[Task]:
        return self._current

    def tasks(self) -> list:
        return list(self._tasks)

    def kill(self, task: Task) -> None:
        """Terminate `task` at its current (or next) yield point."""
        if not task.alive:
            return
        if task is self._current:
            task.kill_pending = True
        else:
            self._kill_now(task)

    def _kill_now(self, task: Task) -> None:
        task.status = KILLED
        task.done_seq = self._next_seq()
        for hook in task._death_hooks:
            hook()
        try:
            task.gen.close()
        except Exception:
            pass
        self._notify_watchers(task)

    def _make_ready(self, task: Task, resume: Any = None) -> None:
        task.status = READY
        task._resume = resume
        task._wait = None
        self._ready.append(task)

    def _complete(self, task: Task, value: Any) -> None:
        task.status = DONE
        task.result = value
        task.done_seq = self._next_seq()
        for hook in task._death_hooks:
            hook()
        if task.owner is not None and not task.owner.alive and task.orphan_cleanup:
            task.orphan_cleanup(value)
        self._notify_watchers(task)

    def _notify_watchers(self, task: Task) -> None:
        for watcher in list(task._watchers):
            task._watchers.discard(watcher)
            if watcher.status != WAITING or watcher._wait is None:
                continue
            wait = watcher._wait
            done = [t for t in wait.tasks if not t.alive]
            satisfied = len(done) == len(wait.tasks) if wait.mode == "all" else bool(done)
            if satisfied:
                for t in wait.tasks:
                    t._watchers.discard(watcher)
                done.sort(key=lambda t: t.done_seq)
                self._make_ready(watcher, resume=done)

    def _handle_effect(self, task: Task, effect: Any) -> None:
        if effect is None:
            task.status = READY
            self._ready.append(task)
        elif isinstance(effect, Sleep):
            task.status = SLEEPING
            heapq.heappush(self._timers, (self.now + effect.dt, self._next_seq(), task))
        elif isinstance(effect, WaitTasks):
            done = [t for t in effect.tasks if not t.alive]
            satisfied = len(done) == len(effect.tasks) if effect.mode == "all" else bool(done)
            if satisfied:
                done.sort(key=lambda t: t.done_seq)
                self._make_ready(task, resume=done)
            else:
                task.status = WAITING
                task._wait = effect
                for t in effect.tasks:
                    if t.alive:
                        t._watchers.add(task)
        elif isinstance(effect, WaitQueue):
            if effect.queue.items:
                task.status = READY
                self._ready.append(task)
            else:
                task.status = WAITING
                effect.queue._waiters.append(task)
        else:
            raise TypeError(f"unknown effect yielded by {task}: {effect!r}")

    def _run_slice(self, task: Task) -> None:
        self._current = task
        task.status = RUNNING
        try:
            effect = task.gen.send(task._resume)
        except StopIteration as stop:
            self._current = None
            self._complete(task, stop.value)
            return
        except Exception:
            self._current = None
            task.status = KILLED
            task.done_seq = self._next_seq()
            raise
        finally:
            self._current = None
            task._resume = None
        if task.kill_pending:
            self._kill_now(task)
        else:
            self._handle_effect(task, effect)

    def run(self, until: Optional[Callable[[], bool]] = None, max_time: Optional[float] = None) -> None:
        """Advance the simulation until `until()` holds, time runs out, or nothing can run."""
        while True:
            if until is not None and until():
                return
            if max_time is not None and self.now >= max_time and not self._ready:
                return
            if self._ready:
                idx = self.rng.randrange(len(self._ready))
                task = self._ready.pop(idx)
                if task.status != READY:
                    continue
                self._run_slice(task)
            elif self._timers:
                when, _, task = heapq.heappop(self._timers)
                if task.status != SLEEPING:
                    continue
                if max_time is not None and when > max_time:
                    heapq.heappush(self._timers, (when, self._next_seq(), task))
                    self.now = max_time
                    return
                self.now = max(self.now, when)
                self._make_ready(task)
            else:
                if until is not None:
                    raise SimDeadlock("no runnable tasks but the run condition is unmet")
                return

    def wait_all(self, tasks: Iterable[Task]):
        """Effect builder: yield this to block until every task finished."""
        return WaitTasks(tuple(tasks), "all")

    def wait_any(self, tasks: Iterable[Task]):
        """Effect builder: yield this to block until at least one task finished."""
        return WaitTasks(tuple(tasks), "any")

"""
Coordination primitives: znodes, watches, and the lock recipe
=============================================================

A tour of the in-process coordination service the strategies are built on:
versioned znodes, ephemeral nodes that die with their session, one-shot
watches delivered on the watcher's own schedule, and the mutual-exclusion
lock built from sequential ephemeral children. Actors here are plain
generators on the deterministic scheduler.
"""

from faultps import sim
from faultps.coord import (EPHEMERAL, CoordService, lock_acquire, lock_release)

service = CoordService()
s = sim.Sim(seed=42)

# -- versioned reads and writes ------------------------------------------------
admin = service.session("admin")
service.create(admin, "/config", b"v1")
print("created /config:", service.get(admin, "/config"))
service.set(admin, "/config", b"v2")
print("after one set:  ", service.get(admin, "/config"))  # version 2

# -- sequential znodes ----------------------------------------------------------
service.create(admin, "/servers")
for _ in range(3):
    path = service.create(admin, "/servers/s", sequential=True)
    print("registered", path)

# -- ephemerals + watches: the failure-detection idiom --------------------------
owner = service.session("owner")
service.create(owner, "/servers/frontend", b"", EPHEMERAL)
watcher = service.session("watcher")
service.get(watcher, "/servers/frontend", watch=True)
service.close_session(owner)  # the "process" dies
event = watcher.events.items.popleft()
print(f"watcher saw: {event.kind} on {event.path}")

# -- the lock recipe under contention -------------------------------------------
service.create(admin, "/locks")
service.create(admin, "/locks/weights")
timeline = []


def worker(name, hold_slices):
    session = service.session(name)
    s.current.on_death(lambda: service.close_session(session))
    handle = yield from lock_acquire(service, session, "/locks/weights")
    timeline.append(f"{name} acquired at t={s.now:.2f}")
    for _ in range(hold_slices):
        yield sim.Sleep(0.1)
    lock_release(service, handle)
    timeline.append(f"{name} released at t={s.now:.2f}")


for i in range(3):
    s.spawn(worker(f"worker-{i}", hold_slices=2))
s.run()

print()
print("lock timeline (strictly serialized):")
for line in timeline:
    print(" ", line)

"""In-process coordination service: hierarchical znodes with persistent and
ephemeral modes, sequential suffixes, versioned reads/writes, one-shot watches,
sessions, and a sequential-ephemeral lock recipe.

Every API call is atomic with respect to the cooperative scheduler (it runs
inside one task slice). Watch events are never delivered inline with the
mutating call: they are queued per session and consumed on the watcher's own
schedule, FIFO per session.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Generator, List, Optional, Set

from . import sim

PERSISTENT = "persistent"
EPHEMERAL = "ephemeral"

DATA_CHANGED = "data-changed"
DELETED = "deleted"
CHILDREN_CHANGED = "children-changed"


class CoordError(Exception):
    pass


class NoNodeError(CoordError):
    pass


class NodeExistsError(CoordError):
    pass


class NoParentError(CoordError):
    pass


class VersionMismatchError(CoordError):
    pass


class SessionClosedError(CoordError):
    pass


@dataclass(frozen=True)
class WatchEvent:
    path: str
    kind: str
    version: int


class Session:
    """One actor's handle on the service; ephemeral nodes die with it."""

    _ids = 0

    def __init__(self, service: "CoordService", name: str):
        Session._ids += 1
        self.sid = Session._ids
        self.name = name or f"session{self.sid}"
        self.service = service
        self.open = True
        self.events = sim.Queue()
        self.ephemerals: List[str] = []

    def wait_event(self) -> Generator:
        """Generator helper: block until this session's next watch event."""
        return sim.wait_queue(self.events)

    def __repr__(self):
        return f"<Session {self.sid} {self.name!r}{'' if self.open else ' closed'}>"


class _Node:
    __slots__ = ("payload", "mode", "version", "cversion", "owner",
                 "children", "seq_counter", "data_watchers", "child_watchers")

    def __init__(self, payload: bytes, mode: str, owner: Optional[Session]):
        self.payload = payload
        self.mode = mode
        self.version = 1
        self.cversion = 0
        self.owner = owner
        self.children: Set[str] = set()
        self.seq_counter = 0
        self.data_watchers: Set[Session] = set()
        self.child_watchers: Set[Session] = set()


def _parent(path: str) -> str:
    head, _, _ = path.rpartition("/")
    return head or "/"


def _basename(path: str) -> str:
    return path.rpartition("/")[2]


def _check_path(path: str) -> None:
    if not path.startswith("/") or (path != "/" and path.endswith("/")) or "//" in path:
        raise CoordError(f"malformed path {path!r}")


class CoordService:
    def __init__(self):
        self._nodes: Dict[str, _Node] = {"/": _Node(b"", PERSISTENT, None)}
        self._sessions: List[Session] = []

    # -- sessions -----------------------------------------------------------

    def session(self, name: str = "") -> Session:
        s = Session(self, name)
        self._sessions.append(s)
        return s

    def close_session(self, session: Session) -> None:
        """Delete the session's ephemerals (firing watches once) and stop delivery."""
        if not session.open:
            return
        session.open = False
        for path in sorted(session.ephemerals):
            if path in self._nodes:
                self._delete_node(path)
        session.ephemerals.clear()

    def _require_open(self, session: Session) -> None:
        if not session.open:
            raise SessionClosedError(f"{session!r} is closed")

    def _notify(self, watchers: Set[Session], event: WatchEvent) -> None:
        for s in sorted(watchers, key=lambda s: s.sid):
            if s.open:
                s.events.push(event)
        watchers.clear()

    # -- tree operations ----------------------------------------------------

    def create(self, session: Session, path: str, payload: bytes = b"",
               mode: str = PERSISTENT, sequential: bool = False) -> str:
        self._require_open(session)
        _check_path(path)
        parent_path = _parent(path)
        parent = self._nodes.get(parent_path)
        if parent is None:
            raise NoParentError(f"no parent for {path!r}")
        if sequential:
            path = f"{path}{parent.seq_counter:010d}"
            parent.seq_counter += 1
        if path in self._nodes:
            raise NodeExistsError(path)
        owner = session if mode == EPHEMERAL else None
        self._nodes[path] = _Node(bytes(payload), mode, owner)
        parent.children.add(_basename(path))
        parent.cversion += 1
        if mode == EPHEMERAL:
            session.ephemerals.append(path)
        self._notify(parent.child_watchers,
                     WatchEvent(parent_path, CHILDREN_CHANGED, parent.cversion))
        return path

    def get(self, session: Session, path: str, watch: bool = False):
        self._require_open(session)
        node = self._nodes.get(path)
        if node is None:
            raise NoNodeError(path)
        if watch:
            node.data_watchers.add(session)
        return node.payload, node.version

    def set(self, session: Session, path: str, payload: bytes,
            expected_version: Optional[int] = None) -> int:
        self._require_open(session)
        node = self._nodes.get(path)
        if node is None:
            raise NoNodeError(path)
        if expected_version is not None and expected_version != node.version:
            raise VersionMismatchError(
                f"{path}: expected version {expected_version}, at {node.version}")
        node.payload = bytes(payload)
        node.version += 1
        self._notify(node.data_watchers, WatchEvent(path, DATA_CHANGED, node.version))
        return node.version

    def delete(self, session: Session, path: str) -> None:
        self._require_open(session)
        if path not in self._nodes:
            raise NoNodeError(path)
        if self._nodes[path].children:
            raise CoordError(f"{path} still has children")
        self._delete_node(path)

    def _delete_node(self, path: str) -> None:
        node = self._nodes.pop(path)
        if node.owner is not None and path in node.owner.ephemerals:
            node.owner.ephemerals.remove(path)
        parent = self._nodes.get(_parent(path))
        if parent is not None:
            parent.children.discard(_basename(path))
            parent.cversion += 1
            self._notify(parent.child_watchers,
                         WatchEvent(_parent(path), CHILDREN_CHANGED, parent.cversion))
        self._notify(node.data_watchers, WatchEvent(path, DELETED, node.version))

    def children(self, session: Session, path: str, watch: bool = False) -> List[str]:
        self._require_open(session)
        node = self._nodes.get(path)
        if node is None:
            raise NoNodeError(path)
        if watch:
            node.child_watchers.add(session)
        return sorted(node.children)

    def exists(self, session: Session, path: str) -> bool:
        self._require_open(session)
        return path in self._nodes

    def ensure_path(self, session: Session, path: str) -> None:
        """Create every missing ancestor of `path` (persistent)."""
        _check_path(path)
        parts = [p for p in path.split("/") if p]
        cur = ""
        for part in parts:
            cur += "/" + part
            if cur not in self._nodes:
                self.create(session, cur)


# ---------------------------------------------------------------------------
# Lock recipe: ephemeral-sequential children, watch the immediate predecessor.


@dataclass
class LockHandle:
    session: Session
    node_path: str


def lock_acquire(service: CoordService, session: Session, lock_path: str) -> Generator:
    """Generator: blocks until the lock is held. Dying sessions release it."""
    if not service.exists(session, lock_path):
        raise NoNodeError(f"lock base {lock_path} does not exist")
    me = service.create(session, f"{lock_path}/lk-", b"", EPHEMERAL, sequential=True)
    mine = _basename(me)
    while True:
        kids = service.children(session, lock_path)
        if kids and kids[0] == mine:
            return LockHandle(session, me)
        pred = kids[kids.index(mine) - 1]
        try:
            service.get(session, f"{lock_path}/{pred}", watch=True)
        except NoNodeError:
            continue
        yield from session.wait_event()


def lock_release(service: CoordService, handle: LockHandle) -> None:
    if handle.session.open and service.exists(handle.session, handle.node_path):
        service.delete(handle.session, handle.node_path)

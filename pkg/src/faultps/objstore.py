"""In-memory immutable object store; payloads are exchanged by opaque reference.

The store is infrastructure, not an actor: it is never subject to failure
injection, so references stay valid across parameter-server kills.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict


class DanglingRefError(Exception):
    pass


@dataclass(frozen=True)
class ObjectRef:
    id: str  # 128-bit hex

    def __str__(self):
        return self.id


class ObjectStore:
    def __init__(self):
        self._objects: Dict[str, bytes] = {}
        self._bytes = 0
        self._counter = 0

    def put(self, payload: bytes) -> ObjectRef:
        self._counter += 1
        ref = ObjectRef(f"{self._counter:032x}")
        data = bytes(payload)
        self._objects[ref.id] = data
        self._bytes += len(data)
        return ref

    def get(self, ref: ObjectRef) -> bytes:
        try:
            return self._objects[ref.id]
        except KeyError:
            raise DanglingRefError(ref.id) from None

    def delete(self, ref: ObjectRef) -> None:
        try:
            payload = self._objects.pop(ref.id)
        except KeyError:
            raise DanglingRefError(ref.id) from None
        self._bytes -= len(payload)

    def contains(self, ref: ObjectRef) -> bool:
        return ref.id in self._objects

    def stored_bytes(self) -> int:
        return self._bytes

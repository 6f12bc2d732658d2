"""OS-neutral audit record format (jsonl-v1).

One JSON object per line::

    {"seq": 1, "ts": 1000, "host": "h1", "family": "READ",
     "subject": {"kind": "Process", "id": "42@1000", "attrs": {"exe_path": "/usr/sbin/nginx"}},
     "object": {"kind": "File", "id": "/etc/passwd", "attrs": {}},
     "bytes": 2048, "flags": [], "aux": {}}

Timestamps are integer microseconds. Entities inherit the host of their event.
"""

from __future__ import annotations

import heapq
import json
import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

FORMAT = "jsonl-v1"


class EntityKind(str, Enum):
    PROCESS = "Process"
    FILE = "File"
    SOCKET = "Socket"
    MEMORY = "Memory"
    USER = "User"


class Family(str, Enum):
    READ = "READ"
    WRITE = "WRITE"
    EXEC = "EXEC"
    FORK = "FORK"
    MPROTECT = "MPROTECT"
    CHMOD = "CHMOD"
    SETUID = "SETUID"
    SEND = "SEND"
    RECV = "RECV"
    UNLINK = "UNLINK"
    CONNECT = "CONNECT"
    ACCEPT = "ACCEPT"


OBJECT_KIND = {
    Family.FORK: EntityKind.PROCESS,
    Family.EXEC: EntityKind.PROCESS,
    Family.READ: EntityKind.FILE,
    Family.WRITE: EntityKind.FILE,
    Family.CHMOD: EntityKind.FILE,
    Family.UNLINK: EntityKind.FILE,
    Family.SEND: EntityKind.SOCKET,
    Family.RECV: EntityKind.SOCKET,
    Family.CONNECT: EntityKind.SOCKET,
    Family.ACCEPT: EntityKind.SOCKET,
    Family.MPROTECT: EntityKind.MEMORY,
    Family.SETUID: EntityKind.USER,
}

BYTE_FAMILIES = frozenset({Family.READ, Family.WRITE, Family.SEND, Family.RECV})

REQUIRED_ATTRS = {
    EntityKind.SOCKET: ("ip", "port"),
    EntityKind.PROCESS: ("exe_path",),
    EntityKind.USER: ("uid",),
}

# (kind, host_id, local_id)
EntityKey = tuple[str, str, str]


class ParseError(ValueError):
    """A record that does not satisfy the jsonl-v1 contract.

    ``reason`` is one of MalformedJson, MissingField, UnknownFamily,
    BadFamilyObjectKind, NegativeBytes, UnexpectedBytes.
    """

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class StreamOrderError(ValueError):
    pass


@dataclass(frozen=True)
class EntityRef:
    kind: EntityKind
    host_id: str
    local_id: str
    attrs: dict[str, str] = field(default_factory=dict, compare=True, hash=False)

    @property
    def key(self) -> EntityKey:
        return (self.kind.value, self.host_id, self.local_id)

    @property
    def name(self) -> str:
        """Short display name: basename of the executable or path, ip:port for sockets."""
        if self.kind is EntityKind.PROCESS:
            return basename(self.attrs.get("exe_path", self.local_id))
        if self.kind is EntityKind.FILE:
            return basename(self.local_id)
        if self.kind is EntityKind.SOCKET:
            return f"{self.attrs.get('ip')}:{self.attrs.get('port')}"
        if self.kind is EntityKind.USER:
            return f"uid={self.attrs.get('uid')}"
        return self.local_id

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "id": self.local_id, "attrs": dict(self.attrs)}


def basename(path: str) -> str:
    return path.replace("\\", "/").rstrip("/").rsplit("/", 1)[-1]


@dataclass(frozen=True)
class Event:
    seq: int
    ts: int
    host_id: str
    family: Family
    subject: EntityRef
    object: EntityRef
    bytes: int = 0
    flags: frozenset[str] = frozenset()
    aux: dict[str, str] = field(default_factory=dict, hash=False)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "seq": self.seq,
            "ts": self.ts,
            "host": self.host_id,
            "family": self.family.value,
            "subject": self.subject.to_json(),
            "object": self.object.to_json(),
        }
        if self.bytes:
            out["bytes"] = self.bytes
        if self.flags:
            out["flags"] = sorted(self.flags)
        if self.aux:
            out["aux"] = dict(self.aux)
        return out


def serialize_event(e: Event) -> str:
    return json.dumps(e.to_json(), separators=(",", ":"), sort_keys=True)


def _require(obj: dict, name: str, typ: type | tuple[type, ...], where: str = "") -> Any:
    if name not in obj:
        raise ParseError("MissingField", where + name)
    val = obj[name]
    # bool is an int subclass; reject it for numeric fields
    if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
        raise ParseError("MalformedJson", f"{where}{name} has type {type(val).__name__}")
    return val


def _parse_entity(raw: Any, host: str, where: str) -> EntityRef:
    if not isinstance(raw, dict):
        raise ParseError("MalformedJson", f"{where} is not an object")
    kind_s = _require(raw, "kind", str, where + ".")
    try:
        kind = EntityKind(kind_s)
    except ValueError:
        raise ParseError("MalformedJson", f"{where}.kind {kind_s!r}") from None
    local_id = _require(raw, "id", str, where + ".")
    attrs = raw.get("attrs", {})
    if not isinstance(attrs, dict):
        raise ParseError("MalformedJson", f"{where}.attrs is not an object")
    attrs = {str(k): str(v) for k, v in attrs.items()}
    for name in REQUIRED_ATTRS.get(kind, ()):
        if name not in attrs:
            raise ParseError("MissingField", f"{where}.attrs.{name}")
    return EntityRef(kind, host, local_id, attrs)


def event_from_json(obj: Any) -> Event:
    if not isinstance(obj, dict):
        raise ParseError("MalformedJson", "record is not an object")
    seq = _require(obj, "seq", int)
    ts = _require(obj, "ts", int)
    host = _require(obj, "host", str)
    fam_s = _require(obj, "family", str)
    try:
        family = Family(fam_s)
    except ValueError:
        raise ParseError("UnknownFamily", fam_s) from None
    if "subject" not in obj:
        raise ParseError("MissingField", "subject")
    if "object" not in obj:
        raise ParseError("MissingField", "object")
    subject = _parse_entity(obj["subject"], host, "subject")
    target = _parse_entity(obj["object"], host, "object")
    if subject.kind is not EntityKind.PROCESS:
        raise ParseError("BadFamilyObjectKind", f"subject kind {subject.kind.value}")
    if target.kind is not OBJECT_KIND[family]:
        raise ParseError("BadFamilyObjectKind", f"{family.value} on {target.kind.value}")
    nbytes = obj.get("bytes", 0)
    if not isinstance(nbytes, int) or isinstance(nbytes, bool):
        raise ParseError("MalformedJson", "bytes is not an integer")
    if nbytes < 0:
        raise ParseError("NegativeBytes", str(nbytes))
    if nbytes and family not in BYTE_FAMILIES:
        raise ParseError("UnexpectedBytes", f"{family.value} carries {nbytes} bytes")
    flags = obj.get("flags", [])
    if not isinstance(flags, list) or not all(isinstance(f, str) for f in flags):
        raise ParseError("MalformedJson", "flags must be an array of strings")
    aux = obj.get("aux", {})
    if not isinstance(aux, dict):
        raise ParseError("MalformedJson", "aux is not an object")
    return Event(
        seq=seq,
        ts=ts,
        host_id=host,
        family=family,
        subject=subject,
        object=target,
        bytes=nbytes,
        flags=frozenset(flags),
        aux={str(k): str(v) for k, v in aux.items()},
    )


def parse_event(line: str) -> Event:
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError("MalformedJson", str(exc)) from None
    return event_from_json(obj)


@dataclass
class EventStream:
    """A time-ordered source of events: a jsonl file, ``-`` for stdin, or an in-memory list."""

    source: str | Path | None = None
    events: list[Event] | None = None
    format: str = FORMAT

    @classmethod
    def from_events(cls, events: Iterable[Event], name: str = "<memory>") -> "EventStream":
        return cls(source=name, events=list(events))

    def __iter__(self) -> Iterator[Event]:
        if self.events is not None:
            yield from self.events
            return
        if self.source is None or str(self.source) == "-":
            yield from _read_lines(sys.stdin, "<stdin>")
            return
        with open(self.source, encoding="utf-8") as fh:
            yield from _read_lines(fh, str(self.source))

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self:
                fh.write(serialize_event(e) + "\n")


def _read_lines(fh, name: str) -> Iterator[Event]:
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            yield parse_event(line)
        except ParseError as exc:
            raise ParseError(exc.reason, f"{name}:{lineno}: {exc.detail}") from None


def _checked(stream: Iterable[Event], idx: int) -> Iterator[Event]:
    last: Event | None = None
    for e in stream:
        if last is not None and (e.ts < last.ts or e.seq <= last.seq):
            raise StreamOrderError(
                f"stream {idx}: seq {e.seq} ts {e.ts} after seq {last.seq} ts {last.ts}"
            )
        last = e
        yield e


def merge_streams(streams: Iterable[Iterable[Event]]) -> Iterator[Event]:
    """Merge individually ordered streams by (ts, host_id, seq).

    heapq.merge is stable, so equal keys keep their input-stream order.
    """
    checked = [_checked(s, i) for i, s in enumerate(streams)]
    return heapq.merge(*checked, key=lambda e: (e.ts, e.host_id, e.seq))

"""Scripted attack scenarios compiled into deterministic event streams.

A script is a YAML document::

    name: drive_by
    platform: linux
    host: ubuntu-14
    stages: [Initial_Compromise, ...]   # kill-chain stages the script covers
    tuple: C,M,-,H,-,H,M                # expected threat tuple
    processes: {firefox: {exe: /usr/lib/firefox/firefox, uid: "1000"}}
    sockets:   {A: {ip: 203.0.113.5, port: 80}}
    steps:
      - {op: recv, proc: firefox, sock: A, bytes: 180000, stage: Initial_Compromise}
      - {op: spawn, parent: firefox, child: net, exe: /tmp/net}
      ...

Step ops and their operands:

    read/write   proc, file, bytes
    send/recv    proc, sock, bytes
    connect/accept  proc, sock
    chmod        proc, file            (adds the PROT_EXEC flag)
    mprotect     proc, mem             (adds the PROT_EXEC flag)
    setuid       proc, uid
    unlink       proc, file
    exec         proc, exe             (replace the image in place)
    spawn        parent, child, exe?   (FORK, then an in-place EXEC when exe is given)
    create       parent, child, exe    (single EXEC creating the child, Windows style)
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ..cdr import EntityKind, EntityRef, Event, EventStream, Family

ATTACK_PID_BASE = 30000
_BYTE_OPS = {"read": Family.READ, "write": Family.WRITE, "send": Family.SEND, "recv": Family.RECV}
_FILE_OPS = {"read", "write", "chmod", "unlink"}
_SOCK_OPS = {"send", "recv", "connect", "accept"}


class UnknownScenario(KeyError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioScript:
    name: str
    platform: str
    host: str
    steps: list[dict[str, Any]]
    processes: dict[str, dict[str, str]] = field(default_factory=dict)
    sockets: dict[str, dict[str, Any]] = field(default_factory=dict)
    stages: list[str] = field(default_factory=list)
    tuple: str = ""
    label: str = "attack"
    description: str = ""

    @classmethod
    def from_mapping(cls, d: dict[str, Any]) -> "ScenarioScript":
        try:
            return cls(
                name=str(d["name"]),
                platform=str(d.get("platform", "linux")),
                host=str(d.get("host", d["name"])),
                steps=list(d["steps"]),
                processes={k: dict(v) for k, v in (d.get("processes") or {}).items()},
                sockets={k: dict(v) for k, v in (d.get("sockets") or {}).items()},
                stages=[str(s) for s in d.get("stages") or ()],
                tuple=str(d.get("tuple", "")),
                label=str(d.get("label", "attack")),
                description=str(d.get("description", "")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ScenarioError(f"bad scenario document: {exc}") from None


def _scenario_dir() -> Path:
    return Path(str(resources.files("provhunt") / "data" / "scenarios"))


def scenario_names() -> list[str]:
    return sorted(p.stem for p in _scenario_dir().glob("*.yaml"))


def load_scenario(name_or_path: str | Path) -> ScenarioScript:
    path = Path(name_or_path)
    if path.suffix not in (".yaml", ".yml") or not path.exists():
        path = _scenario_dir() / f"{name_or_path}.yaml"
        if not path.exists():
            raise UnknownScenario(str(name_or_path))
    with open(path, encoding="utf-8") as fh:
        return ScenarioScript.from_mapping(yaml.safe_load(fh))


@dataclass
class LabeledStream(EventStream):
    """An in-memory stream with one (label, scenario, stage) entry per event."""

    labels: list[tuple[str, str, str]] = field(default_factory=list)


class _Compiler:
    def __init__(self, script: ScenarioScript, seed: int, start_ts: int, host: str | None):
        self.s = script
        self.rng = random.Random(f"{script.name}:{seed}")
        self.host = host or script.host
        self.ts = start_ts
        self.pid = ATTACK_PID_BASE + self.rng.randrange(0, 2000) * 10
        self.procs: dict[str, EntityRef] = {}
        self.events: list[Event] = []
        self.labels: list[tuple[str, str, str]] = []

    def _tick(self) -> int:
        self.ts += self.rng.randint(200_000, 3_000_000)
        return self.ts

    def _new_proc(self, name: str, exe: str | None = None) -> EntityRef:
        spec = self.s.processes.get(name, {})
        exe = exe or spec.get("exe")
        if not exe:
            raise ScenarioError(f"{self.s.name}: process {name!r} has no executable")
        self.pid += 1
        attrs = {"exe_path": exe, "uid": str(spec.get("uid", "1000"))}
        return EntityRef(EntityKind.PROCESS, self.host, f"{self.pid}@{self.ts}", attrs)

    def _proc(self, name: str) -> EntityRef:
        if name not in self.procs:
            self.procs[name] = self._new_proc(name)
        return self.procs[name]

    def _sock(self, name: str) -> EntityRef:
        spec = self.s.sockets.get(name)
        if spec is None:
            raise ScenarioError(f"{self.s.name}: unknown socket {name!r}")
        ip, port = str(spec["ip"]), str(spec["port"])
        proto = str(spec.get("proto", "tcp"))
        return EntityRef(EntityKind.SOCKET, self.host, f"{ip}:{port}/{proto}",
                         {"ip": ip, "port": port, "proto": proto})

    def _file(self, path: str) -> EntityRef:
        return EntityRef(EntityKind.FILE, self.host, path, {})

    def _emit(self, family: Family, subj: EntityRef, obj: EntityRef, stage: str,
              nbytes: int = 0, flags: frozenset[str] = frozenset(), aux: dict | None = None) -> None:
        self.events.append(Event(
            seq=len(self.events) + 1, ts=self._tick(), host_id=self.host, family=family,
            subject=subj, object=obj, bytes=nbytes, flags=flags, aux=aux or {},
        ))
        self.labels.append((self.s.label, self.s.name, stage))

    def step(self, st: dict[str, Any]) -> None:
        op = st.get("op")
        stage = str(st.get("stage", ""))
        if op in _FILE_OPS or op in _SOCK_OPS or op in ("mprotect", "setuid", "exec"):
            p = self._proc(st["proc"])
        if op in _BYTE_OPS:
            obj = self._file(st["file"]) if op in ("read", "write") else self._sock(st["sock"])
            self._emit(_BYTE_OPS[op], p, obj, stage, int(st.get("bytes", 1024)))
        elif op in ("connect", "accept"):
            self._emit(Family(op.upper()), p, self._sock(st["sock"]), stage)
        elif op == "chmod":
            self._emit(Family.CHMOD, p, self._file(st["file"]), stage,
                       flags=frozenset({"PROT_EXEC"}), aux={"mode": str(st.get("mode", "0755"))})
        elif op == "unlink":
            self._emit(Family.UNLINK, p, self._file(st["file"]), stage)
        elif op == "mprotect":
            mem = EntityRef(EntityKind.MEMORY, self.host, f"{p.local_id}:{st.get('mem', 'M1')}", {})
            self._emit(Family.MPROTECT, p, mem, stage, flags=frozenset({"PROT_EXEC"}))
        elif op == "setuid":
            uid = str(st["uid"])
            self._emit(Family.SETUID, p, EntityRef(EntityKind.USER, self.host, uid, {"uid": uid}),
                       stage, aux={"uid": uid})
            self.procs[st["proc"]] = EntityRef(p.kind, p.host_id, p.local_id, {**p.attrs, "uid": uid})
        elif op == "exec":
            new = EntityRef(p.kind, p.host_id, p.local_id, {**p.attrs, "exe_path": str(st["exe"])})
            self._emit(Family.EXEC, p, new, stage, aux={"exe_path": str(st["exe"])})
            self.procs[st["proc"]] = new
        elif op in ("spawn", "create"):
            parent = self._proc(st["parent"])
            name = st["child"]
            if op == "spawn":
                child = self._new_proc(name, parent.attrs["exe_path"])
                self._emit(Family.FORK, parent, child, stage)
                self.procs[name] = child
                if st.get("exe"):
                    self.step({"op": "exec", "proc": name, "exe": st["exe"], "stage": stage})
            else:
                child = self._new_proc(name, str(st["exe"]))
                self._emit(Family.EXEC, parent, child, stage, aux={"exe_path": str(st["exe"])})
                self.procs[name] = child
        else:
            raise ScenarioError(f"{self.s.name}: unknown op {op!r}")


def compile_script(script: ScenarioScript, seed: int = 0, start_ts: int = 0,
                   host: str | None = None) -> LabeledStream:
    c = _Compiler(script, seed, start_ts, host)
    for st in script.steps:
        try:
            c.step(st)
        except KeyError as exc:
            raise ScenarioError(f"{script.name}: step {st!r} lacks {exc}") from None
    return LabeledStream(source=f"scenario:{script.name}:{seed}", events=c.events, labels=c.labels)


def gen_scenario(name: str, seed: int = 0, start_ts: int = 1_600_000_000_000_000,
                 host: str | None = None) -> LabeledStream:
    return compile_script(load_scenario(name), seed, start_ts, host)

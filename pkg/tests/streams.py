"""Random small event streams and builders shared by the graph tests."""

from __future__ import annotations

import random

from provhunt.cdr import EntityKind, EntityRef, Event, Family

HOST = "h1"


def proc(pid: int, exe: str = "/bin/p", uid: str = "1000", host: str = HOST) -> EntityRef:
    return EntityRef(EntityKind.PROCESS, host, f"{pid}@0", {"exe_path": exe, "uid": uid})


def file(path: str, host: str = HOST) -> EntityRef:
    return EntityRef(EntityKind.FILE, host, path, {})


def sock(ip: str, port: int = 80, host: str = HOST) -> EntityRef:
    return EntityRef(EntityKind.SOCKET, host, f"{ip}:{port}/tcp", {"ip": ip, "port": str(port), "proto": "tcp"})


def ev(seq: int, family: Family, subject: EntityRef, obj: EntityRef, nbytes: int = 0,
       ts: int | None = None, flags: frozenset[str] = frozenset(), aux: dict | None = None) -> Event:
    return Event(seq=seq, ts=seq * 10 if ts is None else ts, host_id=subject.host_id, family=family,
                 subject=subject, object=obj, bytes=nbytes, flags=flags, aux=aux or {})


def random_stream(rng: random.Random, n_events: int, n_files: int = 4, n_socks: int = 2,
                  max_procs: int = 6, roots: int = 3) -> list[Event]:
    """Flows among a handful of entities with forks and in-place execs mixed in.

    ``roots`` unrelated processes start the run, so flows can cross process trees.
    """
    procs = [proc(i + 1, f"/bin/r{i}") for i in range(roots)]
    files = [file(f"/f{i}") for i in range(n_files)]
    socks = [sock(f"198.51.100.{i + 1}") for i in range(n_socks)]
    events: list[Event] = []
    next_pid = roots + 1
    for seq in range(1, n_events + 1):
        p = rng.choice(procs)
        roll = rng.random()
        if roll < 0.15 and len(procs) < max_procs:
            child = proc(next_pid, p.attrs["exe_path"])
            next_pid += 1
            procs.append(child)
            events.append(ev(seq, Family.FORK, p, child))
        elif roll < 0.22:
            exe = rng.choice(files).local_id
            img = EntityRef(p.kind, p.host_id, p.local_id, {**p.attrs, "exe_path": exe})
            procs[procs.index(p)] = img
            events.append(ev(seq, Family.EXEC, p, img, aux={"exe_path": exe}))
        elif roll < 0.5:
            events.append(ev(seq, Family.READ, p, rng.choice(files), rng.randint(1, 500)))
        elif roll < 0.75:
            events.append(ev(seq, Family.WRITE, p, rng.choice(files), rng.randint(1, 500)))
        elif roll < 0.88:
            events.append(ev(seq, Family.RECV, p, rng.choice(socks), rng.randint(1, 500)))
        else:
            events.append(ev(seq, Family.SEND, p, rng.choice(socks), rng.randint(1, 500)))
    return events

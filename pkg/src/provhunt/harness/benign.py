"""Seeded background activity: browsing, a web server, mail, admin sessions, cron.

Each activity fires as a Poisson process at its hourly rate and emits a short
burst of events. Long-lived daemons are created on first use, so a profile
whose rates are all zero yields an empty stream. Benign pids stay below the
range used by attack scripts.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..cdr import EntityKind, EntityRef, Event, Family
from .scenario import LabeledStream

HOUR = 3_600_000_000  # microseconds

WEB_SITES = ("93.184.216", "151.101.65", "142.250.72", "104.16.132", "185.199.108",
             "13.107.42", "31.13.71", "172.217.14")
NOVEL_FIRST_OCTETS = (23, 45, 52, 64, 77, 89, 101, 128, 146, 163, 176, 188, 212)
WEB_CLIENTS = ("81.2.69", "24.5.12", "66.249.66", "5.255.253", "73.162.88", "88.99.4")
MAIL_PEERS = ("209.85.220", "40.107.22", "66.102.1")
ADMIN_NET = "10.0.5"
UPDATE_MIRROR = {"linux": ("91.189.88.152", "80"), "freebsd": ("10.0.0.5", "80"),
                 "windows": ("10.0.0.20", "8530")}

_EXE = {
    "linux": {
        "firefox": "/usr/lib/firefox/firefox",
        "nginx": "/usr/sbin/nginx",
        "pmaster": "/usr/lib/postfix/sbin/master",
        "smtpd": "/usr/lib/postfix/sbin/smtpd",
        "local": "/usr/lib/postfix/sbin/local",
        "sshd": "/usr/sbin/sshd",
        "shell": "/bin/bash",
        "sudo": "/usr/bin/sudo",
        "cron": "/usr/sbin/cron",
        "rotate": "/usr/sbin/logrotate",
        "update": "/usr/bin/apt-get",
        "install": "/usr/bin/dpkg",
        "tools": ("/bin/ls", "/bin/cat", "/usr/bin/uptime", "/bin/df", "/usr/bin/vi", "/bin/ps"),
    },
    "freebsd": {
        "firefox": "/usr/local/bin/firefox",
        "nginx": "/usr/local/sbin/nginx",
        "pmaster": "/usr/local/libexec/postfix/master",
        "smtpd": "/usr/local/libexec/postfix/smtpd",
        "local": "/usr/local/libexec/postfix/local",
        "sshd": "/usr/sbin/sshd",
        "shell": "/usr/local/bin/bash",
        "sudo": "/usr/local/bin/sudo",
        "cron": "/usr/sbin/cron",
        "rotate": "/usr/sbin/newsyslog",
        "update": "/usr/sbin/pkg",
        "install": "/usr/sbin/pkg-static",
        "tools": ("/bin/ls", "/bin/cat", "/usr/bin/uptime", "/bin/df", "/usr/bin/vi", "/bin/ps"),
    },
    "windows": {
        "firefox": "C:\\Program Files\\Mozilla Firefox\\firefox.exe",
        "mail": "C:\\Program Files\\Microsoft Office\\root\\Office16\\OUTLOOK.EXE",
        "explorer": "C:\\Windows\\explorer.exe",
        "shell": "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe",
        "svchost": "C:\\Windows\\System32\\svchost.exe",
        "install": "C:\\Windows\\System32\\msiexec.exe",
        "tools": ("C:\\Windows\\System32\\notepad.exe", "C:\\Windows\\System32\\tasklist.exe",
                  "C:\\Windows\\System32\\findstr.exe"),
    },
}

_PATHS = {
    "linux": {"home": "/home/alice", "www": "/usr/share/nginx/html", "log": "/var/log/nginx",
              "spool": "/var/spool/postfix/incoming", "mailbox": "/var/mail/alice",
              "pkgcache": "/var/cache/apt/archives", "lib": "/usr/lib/x86_64-linux-gnu",
              "nginx_conf": "/etc/nginx/nginx.conf"},
    "freebsd": {"home": "/usr/home/alice", "www": "/usr/local/www/nginx", "log": "/var/log/nginx",
                "spool": "/var/spool/postfix/incoming", "mailbox": "/var/mail/alice",
                "pkgcache": "/var/cache/pkg", "lib": "/usr/local/lib",
                "nginx_conf": "/usr/local/etc/nginx/nginx.conf"},
    "windows": {"home": "C:\\Users\\bob", "update": "C:\\Windows\\SoftwareDistribution\\Download",
                "lib": "C:\\Program Files\\Common Files"},
}

PAGES = ("index.html", "about.html", "style.css", "app.js", "logo.png", "contact.html", "news.html")


@dataclass
class BenignProfile:
    """Hourly activity rates for one host."""

    host: str = "host-1"
    platform: str = "linux"
    browse: float = 60.0
    web_requests: float = 240.0
    web_reloads: float = 0.5
    mail: float = 12.0
    admin: float = 3.0
    cron: float = 1.0
    updates: float = 0.25
    # share of page visits that go to a never-seen site; these stay unfiltered
    novel_sites: float = 0.03
    start_ts: int = 1_600_000_000_000_000
    extra: dict[str, float] = field(default_factory=dict)

    @classmethod
    def for_platform(cls, platform: str, host: str, **rates: float) -> "BenignProfile":
        p = cls(host=host, platform=platform, **rates)
        if platform == "windows":
            p.web_requests = p.web_reloads = p.cron = 0.0
        return p

    @classmethod
    def zero(cls, host: str = "host-1", platform: str = "linux") -> "BenignProfile":
        return cls(host=host, platform=platform, browse=0, web_requests=0, web_reloads=0, mail=0,
                   admin=0, cron=0, updates=0)


class _Gen:
    def __init__(self, profile: BenignProfile, seed: int):
        self.p = profile
        self.rng = random.Random(f"benign:{profile.host}:{seed}")
        self.exe = _EXE[profile.platform]
        self.paths = _PATHS[profile.platform]
        self.win = profile.platform == "windows"
        self.next_pid = 1000 + self.rng.randrange(0, 500)
        self.raw: list[tuple[int, int, Family, EntityRef, EntityRef, int, frozenset[str], dict]] = []
        self.order = 0
        self.daemons: dict[str, EntityRef] = {}
        self.workers: list[EntityRef] = []
        self.fresh_workers: set[str] = set()
        self.cache_files: list[str] = []
        self.rotation = 0
        self.counter = 0

    # -- entity helpers --------------------------------------------------------

    def proc(self, exe: str, ts: int, uid: str = "0") -> EntityRef:
        self.next_pid += 1
        if self.next_pid >= 29000:
            self.next_pid = 1000
        return EntityRef(EntityKind.PROCESS, self.p.host, f"{self.next_pid}@{ts}",
                         {"exe_path": exe, "uid": uid})

    def file(self, path: str) -> EntityRef:
        return EntityRef(EntityKind.FILE, self.p.host, path, {})

    def sock(self, ip: str, port: str) -> EntityRef:
        return EntityRef(EntityKind.SOCKET, self.p.host, f"{ip}:{port}/tcp",
                         {"ip": ip, "port": port, "proto": "tcp"})

    def join(self, *parts: str) -> str:
        sep = "\\" if self.win else "/"
        return sep.join(parts)

    def emit(self, ts: int, fam: Family, subj: EntityRef, obj: EntityRef, nbytes: int = 0,
             flags: frozenset[str] = frozenset(), aux: dict | None = None) -> int:
        self.order += 1
        self.raw.append((ts, self.order, fam, subj, obj, nbytes, flags, aux or {}))
        return ts + self.rng.randint(50, 20_000)

    def spawn(self, ts: int, parent: EntityRef, exe: str, uid: str | None = None) -> tuple[EntityRef, int]:
        uid = parent.attrs.get("uid", "0") if uid is None else uid
        if self.win:
            child = self.proc(exe, ts, uid)
            return child, self.emit(ts, Family.EXEC, parent, child, aux={"exe_path": exe})
        child = self.proc(parent.attrs["exe_path"], ts, uid)
        ts = self.emit(ts, Family.FORK, parent, child)
        img = EntityRef(child.kind, child.host_id, child.local_id, {**child.attrs, "exe_path": exe})
        return img, self.emit(ts, Family.EXEC, child, img, aux={"exe_path": exe})

    def daemon(self, name: str, exe: str, ts: int, uid: str = "0") -> EntityRef:
        if name not in self.daemons:
            self.daemons[name] = self.proc(exe, ts, uid)
        return self.daemons[name]

    # -- activities ------------------------------------------------------------

    def browse(self, ts: int) -> None:
        ff = self.daemon("firefox", self.exe["firefox"], ts, "1000")
        if self.rng.random() < self.p.novel_sites:
            prefix = f"{self.rng.choice(NOVEL_FIRST_OCTETS)}.{self.rng.randint(0, 255)}.{self.rng.randint(0, 255)}"
        else:
            prefix = self.rng.choice(WEB_SITES)
        site = self.sock(f"{prefix}.{self.rng.randint(1, 6)}", self.rng.choice(("443", "443", "80")))
        ts = self.emit(ts, Family.CONNECT, ff, site)
        ts = self.emit(ts, Family.SEND, ff, site, self.rng.randint(300, 1200))
        for _ in range(self.rng.randint(1, 3)):
            ts = self.emit(ts, Family.RECV, ff, site, self.rng.randint(1_000, 60_000))
        self.counter += 1
        if self.win:
            cache = self.join(self.paths["home"], "AppData", "Local", "Mozilla", "cache2",
                              f"{self.counter:08X}")
        else:
            cache = self.join(self.paths["home"], ".cache", "mozilla", "cache2", f"{self.counter:08X}")
        ts = self.emit(ts, Family.WRITE, ff, self.file(cache), self.rng.randint(1_000, 60_000))
        self.cache_files.append(cache)
        if len(self.cache_files) > 1 and self.rng.random() < 0.3:
            ts = self.emit(ts, Family.READ, ff, self.file(self.rng.choice(self.cache_files[:-1])),
                           self.rng.randint(1_000, 30_000))
        if self.rng.random() < 0.1:
            mem = EntityRef(EntityKind.MEMORY, self.p.host, f"{ff.local_id}:jit{self.rng.randint(0, 7)}", {})
            self.emit(ts, Family.MPROTECT, ff, mem, flags=frozenset({"PROT_EXEC"}))

    def _nginx_master(self, ts: int) -> EntityRef:
        if "nginx" not in self.daemons:
            master = self.daemon("nginx", self.exe["nginx"], ts)
            ts = self.emit(ts, Family.READ, master, self.file(self.paths["nginx_conf"]), 2_300)
            for _ in range(2):
                ts = self._new_worker(ts)
        return self.daemons["nginx"]

    def _new_worker(self, ts: int) -> int:
        master = self.daemons["nginx"]
        worker = self.proc(self.exe["nginx"], ts, "80")
        ts = self.emit(ts, Family.FORK, master, worker)
        self.workers.append(worker)
        self.fresh_workers.add(worker.local_id)
        return ts

    def web_request(self, ts: int) -> None:
        self._nginx_master(ts)
        worker = self.rng.choice(self.workers)
        client = self.sock(f"{self.rng.choice(WEB_CLIENTS)}.{self.rng.randint(1, 254)}", "80")
        ts = self.emit(ts, Family.ACCEPT, worker, client)
        ts = self.emit(ts, Family.RECV, worker, client, self.rng.randint(200, 900))
        if worker.local_id in self.fresh_workers:
            # user-directory lookups load the password database once per worker
            self.fresh_workers.discard(worker.local_id)
            ts = self.emit(ts, Family.READ, worker, self.file("/etc/passwd"), 2_048)
        page = self.join(self.paths["www"], self.rng.choice(PAGES))
        size = self.rng.randint(500, 30_000)
        ts = self.emit(ts, Family.READ, worker, self.file(page), size)
        ts = self.emit(ts, Family.SEND, worker, client, size + 300)
        self.emit(ts, Family.WRITE, worker, self.file(self.join(self.paths["log"], "access.log")),
                  self.rng.randint(120, 220))

    def web_reload(self, ts: int) -> None:
        self._nginx_master(ts)
        self.workers.pop(0)
        self._new_worker(ts)

    def mail(self, ts: int) -> None:
        peer = self.sock(f"{self.rng.choice(MAIL_PEERS)}.{self.rng.randint(1, 30)}",
                         "443" if self.win else "25")
        size = self.rng.randint(2_000, 60_000)
        self.counter += 1
        if self.win:
            ol = self.daemon("mail", self.exe["mail"], ts, "S-1-5-21-1001")
            ts = self.emit(ts, Family.RECV, ol, peer, size)
            self.emit(ts, Family.WRITE, ol, self.file(self.join(self.paths["home"], "AppData", "Local",
                      "Microsoft", "Outlook", "bob.ost")), size)
            return
        master = self.daemon("pmaster", self.exe["pmaster"], ts)
        smtpd, ts = self.spawn(ts, master, self.exe["smtpd"], "125")
        ts = self.emit(ts, Family.ACCEPT, smtpd, peer)
        ts = self.emit(ts, Family.RECV, smtpd, peer, size)
        queued = self.join(self.paths["spool"], f"{self.counter:010X}")
        ts = self.emit(ts, Family.WRITE, smtpd, self.file(queued), size)
        local, ts = self.spawn(ts, master, self.exe["local"])
        ts = self.emit(ts, Family.READ, local, self.file(queued), size)
        ts = self.emit(ts, Family.READ, local, self.file("/etc/passwd"), 2_048)
        self.emit(ts, Family.WRITE, local, self.file(self.paths["mailbox"]), size)

    def admin(self, ts: int) -> None:
        tools = self.exe["tools"]
        if self.win:
            explorer = self.daemon("explorer", self.exe["explorer"], ts, "S-1-5-21-1001")
            shell, ts = self.spawn(ts, explorer, self.exe["shell"])
            for _ in range(self.rng.randint(1, 4)):
                tool, ts = self.spawn(ts, shell, self.rng.choice(tools))
                ts = self.emit(ts, Family.READ, tool, self.file(
                    self.join(self.paths["home"], "Documents", f"notes{self.rng.randint(1, 9)}.txt")),
                    self.rng.randint(100, 9_000))
            return
        sshd = self.daemon("sshd", self.exe["sshd"], ts)
        session, ts = self.spawn(ts, sshd, self.exe["sshd"])
        peer = self.sock(f"{ADMIN_NET}.{self.rng.randint(2, 40)}", "22")
        ts = self.emit(ts, Family.ACCEPT, session, peer)
        ts = self.emit(ts, Family.RECV, session, peer, self.rng.randint(100, 600))
        shell, ts = self.spawn(ts, session, self.exe["shell"], "1001")
        for _ in range(self.rng.randint(1, 4)):
            roll = self.rng.random()
            if roll < 0.25:
                sudo, ts = self.spawn(ts, shell, self.exe["sudo"])
                ts = self.emit(ts, Family.READ, sudo, self.file("/etc/sudoers"), 1_800)
                tool, ts = self.spawn(ts, sudo, self.rng.choice(tools), "0")
            else:
                tool, ts = self.spawn(ts, shell, self.rng.choice(tools))
            if roll > 0.6:
                ts = self.emit(ts, Family.READ, tool, self.file(self.join(self.paths["log"], "access.log")),
                               self.rng.randint(2_000, 40_000))
        self.emit(ts, Family.SEND, session, peer, self.rng.randint(500, 20_000))

    def cron(self, ts: int) -> None:
        cron = self.daemon("cron", self.exe["cron"], ts)
        rot, ts = self.spawn(ts, cron, self.exe["rotate"])
        self.rotation += 1
        old = self.join(self.paths["log"], f"access.log.{self.rotation % 7 + 1}")
        ts = self.emit(ts, Family.UNLINK, rot, self.file(old))
        self.emit(ts, Family.WRITE, rot, self.file("/var/lib/logrotate/status"), 900)

    def update(self, ts: int) -> None:
        ip, port = UPDATE_MIRROR[self.p.platform]
        mirror = self.sock(ip, port)
        size = self.rng.randint(50_000, 900_000)
        self.counter += 1
        if self.win:
            svc = self.daemon("svchost", self.exe["svchost"], ts, "S-1-5-18")
            ts = self.emit(ts, Family.CONNECT, svc, mirror)
            ts = self.emit(ts, Family.RECV, svc, mirror, size)
            pkg = self.join(self.paths["update"], f"KB{4000000 + self.counter}.cab")
            ts = self.emit(ts, Family.WRITE, svc, self.file(pkg), size)
            inst, ts = self.spawn(ts, svc, self.exe["install"])
            ts = self.emit(ts, Family.READ, inst, self.file(pkg), size)
            self.emit(ts, Family.WRITE, inst, self.file(self.join(self.paths["lib"], f"comp{self.counter}.dll")), size)
            return
        cron = self.daemon("cron", self.exe["cron"], ts)
        upd, ts = self.spawn(ts, cron, self.exe["update"])
        ts = self.emit(ts, Family.CONNECT, upd, mirror)
        ts = self.emit(ts, Family.RECV, upd, mirror, size)
        pkg = self.join(self.paths["pkgcache"], f"pkg{self.counter}.deb")
        ts = self.emit(ts, Family.WRITE, upd, self.file(pkg), size)
        inst, ts = self.spawn(ts, upd, self.exe["install"])
        ts = self.emit(ts, Family.READ, inst, self.file(pkg), size)
        self.emit(ts, Family.WRITE, inst, self.file(self.join(self.paths["lib"], f"lib{self.counter}.so")), size)

    # -- schedule --------------------------------------------------------------

    def run(self, duration_us: int) -> LabeledStream:
        acts = [
            (self.p.browse, self.browse),
            (self.p.web_requests, self.web_request),
            (self.p.web_reloads, self.web_reload),
            (self.p.mail, self.mail),
            (self.p.admin, self.admin),
            (self.p.cron, self.cron),
            (self.p.updates, self.update),
        ]
        start = self.p.start_ts
        schedule: list[tuple[int, int]] = []
        for i, (rate, _) in enumerate(acts):
            if rate <= 0:
                continue
            t = start
            while True:
                t += int(self.rng.expovariate(rate / HOUR))
                if t >= start + duration_us:
                    break
                schedule.append((t, i))
        for t, i in sorted(schedule):
            acts[i][1](t)
        self.raw.sort(key=lambda r: (r[0], r[1]))
        events = [
            Event(seq=n, ts=ts, host_id=self.p.host, family=fam, subject=s, object=o,
                  bytes=b, flags=fl, aux=aux)
            for n, (ts, _, fam, s, o, b, fl, aux) in enumerate(self.raw, 1)
        ]
        return LabeledStream(source=f"benign:{self.p.host}", events=events,
                             labels=[("benign", "", "")] * len(events))


def gen_benign(profile: BenignProfile, duration: float, seed: int = 0) -> LabeledStream:
    """``duration`` in seconds."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    return _Gen(profile, seed).run(int(duration * 1_000_000))

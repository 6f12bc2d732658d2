"""High-level scenario graphs: grouping, threat tuples, scoring, alerting, export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .cdr import EntityKey
from .provgraph import dot_quote
from .ttp import AptStage, MatchedTTP, Severity

N_STAGES = len(AptStage)
DEFAULT_SEVERITY_VALUES = {Severity.L: 2.0, Severity.M: 6.0, Severity.H: 8.0, Severity.C: 10.0}
DEFAULT_WEIGHTS = tuple((10 + i) / 10 for i in range(1, N_STAGES + 1))
DEFAULT_TAU_BASE = 2.09


class UnsupportedFormat(ValueError):
    pass


# -- tuples and scores -------------------------------------------------------


@dataclass(frozen=True)
class ThreatTuple:
    entries: tuple[Severity | None, ...]

    def __post_init__(self) -> None:
        if len(self.entries) != N_STAGES:
            raise ValueError(f"threat tuple needs {N_STAGES} entries, got {len(self.entries)}")

    @classmethod
    def empty(cls) -> "ThreatTuple":
        return cls((None,) * N_STAGES)

    @classmethod
    def parse(cls, text: str) -> "ThreatTuple":
        parts = [p.strip() for p in text.strip().strip("<>()").split(",")]
        if len(parts) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} comma-separated entries, got {len(parts)}")
        try:
            return cls(tuple(None if p in ("-", "") else Severity[p.upper()] for p in parts))
        except KeyError as exc:
            raise ValueError(f"unknown severity {exc}") from None

    @classmethod
    def from_ttps(cls, ttps: Iterable[MatchedTTP]) -> "ThreatTuple":
        best: list[Severity | None] = [None] * N_STAGES
        for t in ttps:
            i = t.rule.stage - 1
            if best[i] is None or t.rule.severity > best[i]:
                best[i] = t.rule.severity
        return cls(tuple(best))

    def merge(self, other: "ThreatTuple") -> "ThreatTuple":
        return ThreatTuple(tuple(
            b if a is None else a if b is None else max(a, b)
            for a, b in zip(self.entries, other.entries)
        ))

    @property
    def stages(self) -> frozenset[AptStage]:
        return frozenset(AptStage(i + 1) for i, s in enumerate(self.entries) if s is not None)

    def labels(self) -> list[str]:
        return ["-" if s is None else s.name for s in self.entries]

    def __str__(self) -> str:
        return "<" + ",".join(self.labels()) + ">"


@dataclass
class ScoreParams:
    severity_values: dict[Severity, float] = field(default_factory=lambda: dict(DEFAULT_SEVERITY_VALUES))
    absent_value: float = 1.0
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    tau: float | None = None
    tau_base: float = DEFAULT_TAU_BASE
    # "all" sums every weight; "auto" drops lateral movement's weight while a
    # single host has been observed.
    tau_policy: str = "auto"

    def __post_init__(self) -> None:
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != N_STAGES or any(w <= 0 for w in self.weights):
            raise ValueError("weights must be 7 positive numbers")
        vals = [self.severity_values[s] for s in Severity]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("severity values must increase strictly with level")
        if self.tau_policy not in ("all", "auto"):
            raise ValueError(f"unknown tau policy {self.tau_policy!r}")

    def active_weight_sum(self, multi_host: bool = True) -> float:
        if multi_host or self.tau_policy == "all":
            return sum(self.weights)
        return sum(w for i, w in enumerate(self.weights) if i + 1 != AptStage.MOVE_LATERALLY)

    def threshold(self, multi_host: bool = True) -> float:
        if self.tau is not None:
            return self.tau
        return self.tau_base ** self.active_weight_sum(multi_host)


def log_threat_score(t: ThreatTuple, p: ScoreParams) -> float:
    return sum(
        w * math.log(p.absent_value if s is None else p.severity_values[s])
        for s, w in zip(t.entries, p.weights)
    )


def threat_score(t: ThreatTuple, p: ScoreParams | None = None) -> float:
    return math.exp(log_threat_score(t, p or ScoreParams()))


def normalized_score(score: float, n: float | None = None, p: ScoreParams | None = None,
                     multi_host: bool = True) -> float:
    """score ** (1/n); n defaults to the active weight sum of ``p``."""
    if n is None:
        n = (p or ScoreParams()).active_weight_sum(multi_host)
    return score ** (1.0 / n)


def calibrate_threshold(attack_scores: Sequence[float], benign_scores: Sequence[float],
                        n: float) -> float:
    """Base b such that tau = b ** n sits midway (on the nth-root scale) between
    the highest benign and the lowest attack score."""
    if not attack_scores:
        raise ValueError("need at least one attack score")
    lo = max((normalized_score(s, n) for s in benign_scores), default=1.0)
    hi = min(normalized_score(s, n) for s in attack_scores)
    return (lo + hi) / 2


# -- graphs ------------------------------------------------------------------


@dataclass
class HsgNode:
    id: int
    name: str
    stage: AptStage
    severity: Severity
    entities: dict[str, str]
    ts: int
    host: str

    @classmethod
    def of(cls, t: MatchedTTP) -> "HsgNode":
        return cls(t.id, t.rule.name, t.rule.stage, t.rule.severity, t.describe_entities(),
                   t.ts, t.host_id)

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "name": self.name, "stage": self.stage.label,
                "severity": self.severity.name, "entities": self.entities,
                "ts": self.ts, "host": self.host}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "HsgNode":
        stage = AptStage.parse(d["stage"])
        if stage is None:
            raise ValueError(f"unknown stage {d['stage']!r}")
        return cls(int(d["id"]), d["name"], stage, Severity[d["severity"]],
                   dict(d["entities"]), int(d["ts"]), d["host"])


@dataclass
class Hsg:
    id: int
    nodes: dict[int, HsgNode] = field(default_factory=dict)
    prereq_edges: set[tuple[int, int, str]] = field(default_factory=set)
    host_set: set[str] = field(default_factory=set)

    @property
    def ttp_nodes(self) -> set[int]:
        return set(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.prereq_edges)

    def threat_tuple(self) -> ThreatTuple:
        best: list[Severity | None] = [None] * N_STAGES
        for n in self.nodes.values():
            i = n.stage - 1
            if best[i] is None or n.severity > best[i]:
                best[i] = n.severity
        return ThreatTuple(tuple(best))

    def names(self) -> set[str]:
        return {n.name for n in self.nodes.values()}

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "hosts": sorted(self.host_set),
            "tuple": self.threat_tuple().labels(),
            "nodes": [self.nodes[i].to_json() for i in sorted(self.nodes)],
            "edges": [{"src": a, "dst": b, "clause": c} for a, b, c in sorted(self.prereq_edges)],
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Hsg":
        return cls(
            id=int(d["id"]),
            nodes={int(n["id"]): HsgNode.from_json(n) for n in d["nodes"]},
            prereq_edges={(int(e["src"]), int(e["dst"]), e["clause"]) for e in d["edges"]},
            host_set=set(d.get("hosts", ())),
        )


def threat_tuple(h: Hsg) -> ThreatTuple:
    return h.threat_tuple()


def _dot_id(i: int) -> str:
    return f"t{i}"


def export_hsg(h: Hsg, fmt: str = "dot") -> str:
    if fmt == "json":
        return json.dumps(h.to_json(), indent=1, sort_keys=True)
    if fmt != "dot":
        raise UnsupportedFormat(fmt)
    lines = [f"digraph hsg_{h.id} {{", "  rankdir=TB;", "  node [shape=box];"]
    for i in sorted(h.nodes):
        n = h.nodes[i]
        args = ", ".join(f"{p}={v}" for p, v in n.entities.items())
        label = f"{n.name}({args})\n{n.stage.label} [{n.severity.name}]"
        lines.append(f"  {_dot_id(i)} [label={dot_quote(label)}];")
    for a, b, clause in sorted(h.prereq_edges):
        lines.append(f"  {_dot_id(a)} -> {_dot_id(b)} [label={dot_quote(clause)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


class HsgState:
    """Union-find over matched TTPs. A component's id is its smallest TTP id."""

    def __init__(self) -> None:
        self.ttps: dict[int, MatchedTTP] = {}
        self._parent: dict[int, int] = {}
        self.members: dict[int, list[int]] = {}
        self.edges: dict[int, set[tuple[int, int, str]]] = {}
        self.hosts: dict[int, set[str]] = {}
        self.tuples: dict[int, ThreatTuple] = {}
        self._owner: dict[EntityKey, int] = {}

    def find(self, i: int) -> int:
        root = i
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[i] != root:
            self._parent[i], i = root, self._parent[i]
        return root

    def _union(self, a: int, b: int) -> int:
        a, b = self.find(a), self.find(b)
        if a == b:
            return a
        keep, gone = min(a, b), max(a, b)
        self._parent[gone] = keep
        self.members[keep].extend(self.members.pop(gone))
        self.edges[keep] |= self.edges.pop(gone)
        self.hosts[keep] |= self.hosts.pop(gone)
        self.tuples[keep] = self.tuples[keep].merge(self.tuples.pop(gone))
        return keep

    def add_ttp(self, t: MatchedTTP) -> int:
        """Place ``t`` in the component of its witnesses and of any TTP sharing a
        bound entity, merging components as needed. Returns the component id."""
        i = t.id
        self.ttps[i] = t
        self._parent[i] = i
        self.members[i] = [i]
        self.edges[i] = set()
        self.hosts[i] = {t.host_id}
        self.tuples[i] = ThreatTuple.from_ttps([t])
        root = i
        for clause, w in t.satisfied_prereqs:
            if w in self._parent:
                root = self._union(root, w)
                self.edges[root].add((w, i, clause.label))
        for ref in t.entities.values():
            other = self._owner.setdefault(ref.key, i)
            if other != i:
                root = self._union(root, other)
        return self.find(i)

    def __contains__(self, ttp_id: int) -> bool:
        return ttp_id in self._parent

    def roots(self) -> list[int]:
        return sorted(self.members)

    def threat_tuple(self, root: int) -> ThreatTuple:
        return self.tuples[self.find(root)]

    def snapshot(self, root: int) -> Hsg:
        root = self.find(root)
        return Hsg(
            id=root,
            nodes={i: HsgNode.of(self.ttps[i]) for i in sorted(self.members[root])},
            prereq_edges=set(self.edges[root]),
            host_set=set(self.hosts[root]),
        )

    def hsgs(self) -> list[Hsg]:
        return [self.snapshot(r) for r in self.roots()]

    def edge_count(self) -> int:
        return sum(len(e) for e in self.edges.values())


# -- detection ---------------------------------------------------------------


@dataclass
class Alert:
    ts: int
    hsg_id: int
    score: float
    normalized_score: float
    tuple: ThreatTuple
    ttps: list[dict[str, Any]]
    hosts: list[str]
    threshold: float

    def to_json(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "hsg_id": self.hsg_id,
            "score": round(self.score, 4),
            "normalized_score": round(self.normalized_score, 6),
            "threshold": round(self.threshold, 4),
            "tuple": self.tuple.labels(),
            "ttps": self.ttps,
            "hosts": self.hosts,
        }


def detect(h: Hsg, p: ScoreParams, ts: int | None = None, multi_host: bool = True) -> Alert | None:
    """Alert for ``h`` when its score reaches the threshold."""
    if not h.nodes:
        return None
    tup = h.threat_tuple()
    score = threat_score(tup, p)
    tau = p.threshold(multi_host)
    if score < tau:
        return None
    return Alert(
        ts=max(n.ts for n in h.nodes.values()) if ts is None else ts,
        hsg_id=h.id,
        score=score,
        normalized_score=normalized_score(score, p=p, multi_host=multi_host),
        tuple=tup,
        ttps=[{"id": n.id, "name": n.name, "stage": n.stage.label,
               "severity": n.severity.name, "entities": n.entities}
              for n in sorted(h.nodes.values(), key=lambda n: n.id)],
        hosts=sorted(h.host_set),
        threshold=tau,
    )


class Detector:
    """Raises one alert per HSG, and again only when its covered stages grow."""

    def __init__(self, params: ScoreParams):
        self.params = params
        self.alerted: dict[int, frozenset[AptStage]] = {}
        self.alerts: list[Alert] = []

    def check(self, state: HsgState, root: int, ts: int, multi_host: bool) -> Alert | None:
        stages = state.threat_tuple(root).stages
        seen: frozenset[AptStage] = frozenset()
        # a merge may have folded previously alerted components into root
        for r in [r for r in self.alerted if state.find(r) == root]:
            seen |= self.alerted.pop(r)
        if seen:
            self.alerted[root] = seen
        if seen and stages <= seen:
            return None
        if threat_score(state.threat_tuple(root), self.params) < self.params.threshold(multi_host):
            return None
        alert = detect(state.snapshot(root), self.params, ts, multi_host)
        if alert is not None:
            self.alerted[root] = seen | stages
            self.alerts.append(alert)
        return alert

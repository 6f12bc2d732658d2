"""Single-consumer detection pipeline.

Per event: graph update, path_factor propagation over the new edges, byte
accounting, rule matching, noise filtering, origin registration, HSG update and
threshold check.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from typing import Iterable

from .cdr import EntityKey, Event
from .flowtrack import PathFactorTable
from .hsg import Alert, Detector, HsgState, ScoreParams
from .noise import NoiseModel, pair_of, should_filter
from .provgraph import GraphDelta, NodeId, ProvGraph
from .ttp import MatchedTTP, Matcher, RuleSet

logger = logging.getLogger(__name__)


class Engine:
    def __init__(self, rules: RuleSet, params: ScoreParams | None = None,
                 model: NoiseModel | None = None, path_thres: int = 3):
        self.rules = rules
        self.params = params or ScoreParams()
        self.model = model
        self.graph = ProvGraph(version_hook=self._version_hook)
        self.pft = PathFactorTable(self.graph, path_thres)
        self.matcher = Matcher(rules, self.graph, self.pft)
        self.hsg = HsgState()
        self.detector = Detector(self.params)
        self.pair_bytes: dict[tuple[EntityKey, EntityKey], int] = defaultdict(int)
        self.hosts: set[str] = set()
        self.stats: Counter[str] = Counter()
        self._origin_rules = {r.name for r in rules if rules.is_origin_rule(r)}

    def _version_hook(self, src: NodeId, dst: NodeId) -> bool:
        return self.pft.would_change(src, dst)

    def _apply(self, delta: GraphDelta) -> None:
        for edge in delta.new_edges:
            self.pft.propagate(edge)

    @property
    def multi_host(self) -> bool:
        return len(self.hosts) > 1

    @property
    def alerts(self) -> list[Alert]:
        return self.detector.alerts

    def process(self, e: Event) -> list[Alert]:
        self.stats["events"] += 1
        self.hosts.add(e.host_id)
        delta = self.graph.add_event(e)
        self._apply(delta)
        if e.bytes:
            self.pair_bytes[(e.subject.key, e.object.key)] += e.bytes
        touched: list[int] = []
        for t, is_new in self.matcher.match_event(e, delta):
            if is_new:
                self.stats["matches"] += 1
            elif t.status == "active":
                continue
            if self.model is not None and should_filter(t, self.pair_bytes.get(pair_of(t), 0), self.model):
                if t.status != "filtered":
                    self.stats["filtered"] += 1
                t.status = "filtered"
                continue
            if t.status == "filtered":
                self.stats["filtered"] -= 1
            t.status = "active"
            touched.append(self._activate(t, e.ts))
        alerts = []
        for root in dict.fromkeys(self.hsg.find(r) for r in touched):
            alert = self.detector.check(self.hsg, root, e.ts, self.multi_host)
            if alert is not None:
                logger.info("alert hsg=%d score=%.1f tuple=%s", alert.hsg_id, alert.score, alert.tuple)
                alerts.append(alert)
        return alerts

    def _activate(self, t: MatchedTTP, ts: int) -> int:
        if t.rule.name in self._origin_rules:
            key = t.principal.key
            node = self.graph.current_node(key)
            if self.graph.out_edges(node):
                # keep already-propagated tables final: seed a fresh version instead
                self._apply(self.graph.new_version(key, ts))
                node = self.graph.current_node(key)
            self.pft.register_origin(t.id, [node])
            t.bindings[t.rule.principal] = node
        return self.hsg.add_ttp(t)

    def run(self, events: Iterable[Event]) -> list[Alert]:
        out: list[Alert] = []
        for e in events:
            out.extend(self.process(e))
        return out

    def training_matches(self) -> list[tuple[MatchedTTP, int]]:
        return [(t, self.pair_bytes.get(pair_of(t), 0)) for t in self.matcher.by_id.values()]

    def summary(self) -> dict[str, int]:
        s = dict(self.stats)
        s.update(
            nodes=len(self.graph.nodes),
            edges=len(self.graph.edges),
            pruned=self.graph.pruned,
            mappers=self.pft.mapper_count(),
            hsgs=len(self.hsg.roots()),
            hsg_edges=self.hsg.edge_count(),
            alerts=len(self.alerts),
        )
        return s

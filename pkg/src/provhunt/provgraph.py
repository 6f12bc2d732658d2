"""Versioned, acyclic provenance graph.

Nodes are (entity key, version) pairs. Edges follow information flow. Before an
edge is attached to a node, we check whether it would grow the node's set of
graph ancestors; if it would, the edge goes to a fresh version instead, which
inherits the previous version through a ``VERSION`` edge. Since an edge only
ever lands on a node that already depends on its source, or on a brand new
node, the graph can never acquire a cycle.

Ancestor sets are kept as Python ints used as bitsets over node indices.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

from .cdr import EntityKey, EntityKind, EntityRef, Event, Family

VERSION = "VERSION"

_INBOUND = frozenset({Family.READ, Family.RECV, Family.SETUID})
_OUTBOUND = frozenset({Family.WRITE, Family.SEND, Family.UNLINK, Family.CHMOD, Family.MPROTECT})

DOT_SHAPES = {
    EntityKind.PROCESS: "rectangle",
    EntityKind.FILE: "oval",
    EntityKind.SOCKET: "diamond",
    EntityKind.MEMORY: "pentagon",
    EntityKind.USER: "star",
}


def dot_quote(text: str) -> str:
    """A DOT string literal; newlines become centered line breaks."""
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


class NodeId(NamedTuple):
    base: EntityKey
    version: int

    @property
    def kind(self) -> EntityKind:
        return EntityKind(self.base[0])

    def label(self) -> str:
        return f"{self.base[0]}:{self.base[1]}:{self.base[2]}#{self.version}"


@dataclass
class NodeInfo:
    id: NodeId
    attrs: dict[str, str]
    ts: int


@dataclass(frozen=True)
class ProvEdge:
    src: NodeId
    dst: NodeId
    family: str
    ts: int
    bytes: int = 0
    event_seq: int = -1


@dataclass
class GraphDelta:
    new_nodes: list[NodeId] = field(default_factory=list)
    new_edges: list[ProvEdge] = field(default_factory=list)
    versions_created: list[NodeId] = field(default_factory=list)
    pruned: int = 0
    # current version of each touched entity before the event was applied
    pre: dict[EntityKey, NodeId | None] = field(default_factory=dict)


# (src, dst) -> True when attaching src->dst to dst's current version would
# change state derived from the graph; forces a new version.
VersionHook = Callable[[NodeId, NodeId], bool]


class ProvGraph:
    def __init__(self, version_hook: VersionHook | None = None):
        self.version_hook = version_hook
        self.nodes: dict[NodeId, NodeInfo] = {}
        self.edges: list[ProvEdge] = []
        self.current: dict[EntityKey, NodeId] = {}
        self.parent: dict[EntityKey, EntityKey] = {}
        self.ancestors: dict[EntityKey, frozenset[EntityKey]] = {}
        self.tree_root: dict[EntityKey, EntityKey] = {}
        self.pruned = 0
        self._index: dict[NodeId, int] = {}
        self._by_index: list[NodeId] = []
        self._anc: list[int] = []
        self._out: dict[NodeId, list[ProvEdge]] = defaultdict(list)
        self._in: dict[NodeId, list[ProvEdge]] = defaultdict(list)

    # -- queries -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def current_node(self, key: EntityKey) -> NodeId | None:
        return self.current.get(key)

    def attrs(self, node: NodeId) -> dict[str, str]:
        return self.nodes[node].attrs

    def entity(self, key: EntityKey) -> EntityRef:
        node = self.current[key]
        return EntityRef(EntityKind(key[0]), key[1], key[2], dict(self.nodes[node].attrs))

    def out_edges(self, node: NodeId) -> list[ProvEdge]:
        return self._out.get(node, [])

    def in_edges(self, node: NodeId) -> list[ProvEdge]:
        return self._in.get(node, [])

    def successors(self, node: NodeId) -> Iterator[NodeId]:
        for e in self._out.get(node, ()):
            yield e.dst

    def root_of(self, key: EntityKey) -> EntityKey:
        return self.tree_root.get(key, key)

    def ancestor_nodes(self, node: NodeId) -> set[NodeId]:
        bits = self._anc[self._index[node]]
        return {self._by_index[i] for i in _iter_bits(bits)}

    def reaches(self, a: NodeId, b: NodeId) -> bool:
        return bool(self._anc[self._index[b]] >> self._index[a] & 1)

    def versions(self, key: EntityKey) -> list[NodeId]:
        cur = self.current.get(key)
        return [] if cur is None else [NodeId(key, v) for v in range(cur.version + 1)]

    # -- versioning --------------------------------------------------------

    def needs_new_version(self, target: NodeId, incoming_src: NodeId) -> bool:
        """True iff the edge incoming_src -> target would give target a new dependency.

        A source whose every dependency outside target's closure is itself
        derived from target (e.g. a file written only by target) adds nothing.
        """
        return self._new_deps(incoming_src, target) and not self._self_derived(incoming_src, target)

    def _new_deps(self, src: NodeId, dst: NodeId) -> bool:
        si, di = self._index[src], self._index[dst]
        return bool(((self._anc[si] | 1 << si) & ~self._anc[di]))

    def _self_derived(self, src: NodeId, dst: NodeId) -> bool:
        si, di = self._index[src], self._index[dst]
        if not self._anc[si] >> di & 1:
            return False
        new = (self._anc[si] | 1 << si) & ~(self._anc[di] | 1 << di)
        return all(self._anc[i] >> di & 1 for i in _iter_bits(new))

    def _add_node(self, key: EntityKey, attrs: dict[str, str], ts: int, delta: GraphDelta) -> NodeId:
        prev = self.current.get(key)
        node = NodeId(key, 0 if prev is None else prev.version + 1)
        idx = len(self._by_index)
        self._index[node] = idx
        self._by_index.append(node)
        self._anc.append(0)
        self.nodes[node] = NodeInfo(node, attrs, ts)
        self.current[key] = node
        delta.new_nodes.append(node)
        if prev is not None:
            delta.versions_created.append(node)
            self._link(prev, node, VERSION, ts, 0, -1, delta)
        return node

    def _link(self, src: NodeId, dst: NodeId, family: str, ts: int, nbytes: int, seq: int,
              delta: GraphDelta) -> ProvEdge:
        edge = ProvEdge(src, dst, family, ts, nbytes, seq)
        si, di = self._index[src], self._index[dst]
        self._anc[di] |= self._anc[si] | 1 << si
        self.edges.append(edge)
        self._out[src].append(edge)
        self._in[dst].append(edge)
        delta.new_edges.append(edge)
        return edge

    def _flow(self, src_key: EntityKey, dst_key: EntityKey, e: Event, delta: GraphDelta,
              family: str | None = None, force_version: bool = False,
              attrs: dict[str, str] | None = None) -> None:
        src = self.current[src_key]
        dst = self.current[dst_key]
        family = family or e.family.value
        if not force_version and delta.pre.get(dst_key, dst) is None and not self._out[dst]:
            # created by this very event: nothing depends on it yet
            self._link(src, dst, family, e.ts, e.bytes, e.seq, delta)
            return
        if not force_version:
            redundant = not self._new_deps(src, dst)
            if redundant or self._self_derived(src, dst):
                if self.version_hook is None or not self.version_hook(src, dst):
                    if redundant:
                        self._link(src, dst, family, e.ts, e.bytes, e.seq, delta)
                    else:
                        self.pruned += 1
                        delta.pruned += 1
                    return
        new_attrs = dict(self.nodes[dst].attrs) if attrs is None else attrs
        node = self._add_node(dst_key, new_attrs, e.ts, delta)
        self._link(src, node, family, e.ts, e.bytes, e.seq, delta)

    def new_version(self, key: EntityKey, ts: int) -> GraphDelta:
        """Start a fresh version of ``key`` whose only in-edge is the version link."""
        delta = GraphDelta()
        self._add_node(key, dict(self.nodes[self.current[key]].attrs), ts, delta)
        return delta

    # -- construction ------------------------------------------------------

    def _ensure(self, ent: EntityRef, ts: int, delta: GraphDelta) -> EntityKey:
        key = ent.key
        if key not in self.current:
            self._add_node(key, dict(ent.attrs), ts, delta)
            if ent.kind is EntityKind.PROCESS:
                self._set_parent(key, None)
        return key

    def _set_parent(self, child: EntityKey, parent: EntityKey | None) -> None:
        if parent is None:
            self.ancestors[child] = frozenset({child})
            self.tree_root[child] = child
        else:
            self.parent[child] = parent
            self.ancestors[child] = self.ancestors[parent] | {child}
            self.tree_root[child] = self.tree_root[parent]

    def _spawn(self, parent: EntityKey, child: EntityRef, e: Event, delta: GraphDelta,
               exe: EntityKey | None = None) -> None:
        key = child.key
        if key in self.current:
            self._flow(parent, key, e, delta, family=Family.FORK.value)
            if exe is not None:
                self._flow(exe, key, e, delta, family=Family.EXEC.value)
            return
        node = self._add_node(key, dict(child.attrs), e.ts, delta)
        self._set_parent(key, parent)
        self._link(self.current[parent], node, Family.FORK.value, e.ts, 0, e.seq, delta)
        if exe is not None:
            self._link(self.current[exe], node, Family.EXEC.value, e.ts, 0, e.seq, delta)

    def parent_of(self, key: EntityKey) -> EntityKey | None:
        return self.parent.get(key)

    def add_event(self, e: Event) -> GraphDelta:
        delta = GraphDelta()
        subj, obj = e.subject, e.object
        exe_ref = None
        if e.family is Family.EXEC:
            exe_ref = EntityRef(EntityKind.FILE, e.host_id, obj.attrs.get("exe_path", ""), {})
        for ref in (subj, obj, exe_ref):
            if ref is not None:
                delta.pre[ref.key] = self.current.get(ref.key)
        s = self._ensure(subj, e.ts, delta)
        fam = e.family
        if fam is Family.FORK:
            self._spawn(s, obj, e, delta)
        elif fam is Family.EXEC:
            f = self._ensure(exe_ref, e.ts, delta)
            if obj.key == s:
                attrs = dict(self.nodes[self.current[s]].attrs)
                attrs.update(obj.attrs)
                self._flow(f, s, e, delta, force_version=True, attrs=attrs)
            else:
                self._spawn(s, obj, e, delta, exe=f)
        else:
            o = self._ensure(obj, e.ts, delta)
            if fam in _INBOUND:
                self._flow(o, s, e, delta)
            elif fam in _OUTBOUND:
                self._flow(s, o, e, delta)
            # CONNECT / ACCEPT only materialize the socket; payload flows via SEND/RECV
        return delta

    # -- export ------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": n.label(), "kind": n.base[0], "host": n.base[1], "local_id": n.base[2],
                 "version": n.version, "attrs": info.attrs}
                for n, info in self.nodes.items()
            ],
            "edges": [
                {"src": e.src.label(), "dst": e.dst.label(), "family": e.family,
                 "ts": e.ts, "bytes": e.bytes}
                for e in self.edges
            ],
        }

    def to_dot(self) -> str:
        lines = ["digraph provenance {", "  rankdir=LR;"]
        for n, info in self.nodes.items():
            ref = EntityRef(n.kind, n.base[1], n.base[2], info.attrs)
            label = f"{ref.name}#{n.version}" if n.version else ref.name
            lines.append(f"  {dot_quote(n.label())} [shape={DOT_SHAPES[n.kind]}, label={dot_quote(label)}];")
        for e in self.edges:
            style = ", style=dotted" if e.family == VERSION else ""
            lines.append(f"  {dot_quote(e.src.label())} -> {dot_quote(e.dst.label())} "
                         f"[label={dot_quote(e.family)}{style}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _iter_bits(bits: int) -> Iterator[int]:
    while bits:
        low = bits & -bits
        yield low.bit_length() - 1
        bits ^= low


def graph_ancestor_sets(g: ProvGraph) -> dict[NodeId, set[NodeId]]:
    """Exact ancestor sets by backward search from every node. Test oracle; O(V*E)."""
    out: dict[NodeId, set[NodeId]] = {}
    for node in g.nodes:
        seen: set[NodeId] = set()
        stack = [node]
        while stack:
            for e in g.in_edges(stack.pop()):
                if e.src not in seen:
                    seen.add(e.src)
                    stack.append(e.src)
        out[node] = seen
    return out

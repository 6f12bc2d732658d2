"""Incremental path_factor bookkeeping over the versioned provenance graph.

Process ancestry is a forest, so the minimum ancestral cover of a flow path is
the number of distinct process-tree roots on it. For each node version and each
origin (a matched TTP), we keep the minimal root-sets over all paths from the
origin, i.e. an antichain under set inclusion. A single best set is not enough:
two paths may tie in size and diverge later. path_factor is the size of the
smallest set. Sets larger than path_thres are dropped, since they can only grow.

Tables are immutable ``Mapper`` objects shared between nodes whenever an edge
leaves them unchanged, so a process tree carrying the same origins references a
single record.
"""

from __future__ import annotations

import itertools
import json
from typing import Any, Callable, Hashable, Iterable, Iterator

from .cdr import EntityKey, EntityKind
from .provgraph import NodeId, ProvEdge, ProvGraph

RootSet = frozenset[EntityKey]
Antichain = frozenset[RootSet]
OriginId = Hashable


class Mapper(dict):
    """origin id -> antichain of root-sets. Treated as immutable once stored."""

    __slots__ = ("parent", "added", "_memo")

    def __init__(self, base: Mapper | None = None):
        super().__init__(base or ())
        # origins never leave a table, so a derived table is its parent plus ``added``
        self.parent = base
        self.added: list[OriginId] = []
        self._memo: dict | None = None

    def value(self, origin: OriginId) -> int | None:
        sets = self.get(origin)
        return None if not sets else min(len(s) for s in sets)

    def least(self, key: Hashable, rank: Callable[[OriginId], Any]):
        """Smallest non-None ``rank(origin)`` over present origins, memoized under ``key``.

        ``rank`` must give the same answer for an origin every time it is asked
        under the same key.
        """
        chain: list[Mapper] = []
        node: Mapper | None = self
        while node is not None and (node._memo is None or key not in node._memo):
            chain.append(node)
            node = node.parent
        best = None if node is None else node._memo[key]
        for m in reversed(chain):
            scan = m.added if m.parent is not None else list(m)
            for origin in scan:
                r = rank(origin) if m.get(origin) else None
                if r is not None and (best is None or r < best):
                    best = r
            if m._memo is None:
                m._memo = {}
            m._memo[key] = best
        return best


_EMPTY = Mapper()


def minimal_sets(sets: Iterable[RootSet]) -> Antichain:
    ordered = sorted(set(sets), key=len)
    keep: list[RootSet] = []
    for s in ordered:
        if not any(k <= s for k in keep):
            keep.append(s)
    return frozenset(keep)


def _dominated(candidates: Iterable[RootSet], existing: Antichain) -> bool:
    return all(any(k <= c for k in existing) for c in candidates)


class PathFactorTable:
    def __init__(self, graph: ProvGraph, path_thres: int = 3):
        self.graph = graph
        self.path_thres = path_thres
        self._tables: dict[NodeId, Mapper] = {}
        self.origins: dict[OriginId, NodeId] = {}
        self._grown: dict[tuple[Antichain, EntityKey], Antichain] = {}
        # (src entity, dst entity) -> src table last merged. An entity's tables only
        # grow across versions, so later merges need only the origins added since.
        self._absorbed: dict[tuple[EntityKey, EntityKey], Mapper] = {}

    # -- lookups -----------------------------------------------------------

    def table(self, node: NodeId) -> Mapper:
        return self._tables.get(node, _EMPTY)

    def value(self, node: NodeId, origin: OriginId) -> int | None:
        return self.table(node).value(origin)

    def values(self, node: NodeId) -> dict[OriginId, int]:
        t = self.table(node)
        return {o: t.value(o) for o in t}

    def mapper_count(self) -> int:
        return len({id(m) for m in self._tables.values()})

    # -- updates -----------------------------------------------------------

    def _root_of(self, node: NodeId) -> EntityKey | None:
        if node.kind is EntityKind.PROCESS:
            return self.graph.root_of(node.base)
        return None

    def _grow(self, sets: Antichain, root: EntityKey | None) -> Antichain:
        """Root-sets after entering a process of tree ``root``; memoized per antichain."""
        if root is None:
            return sets
        key = (sets, root)
        out = self._grown.get(key)
        if out is None:
            grown = [s if root in s else s | {root} for s in sets]
            out = minimal_sets(s for s in grown if len(s) <= self.path_thres)
            self._grown[key] = out
        return out

    def would_change(self, src: NodeId, dst: NodeId) -> bool:
        """Whether an edge src -> dst would alter dst's table."""
        src_table = self.table(src)
        if not src_table:
            return False
        current = self.table(dst)
        if current is src_table:
            return False
        root = self._root_of(dst)
        for origin, sets in src_table.items():
            contrib = self._grow(sets, root)
            if not contrib:
                continue
            have = current.get(origin)
            if have is None or (have is not contrib and not _dominated(contrib, have)):
                return True
        return False

    def propagate(self, edge: ProvEdge) -> None:
        src, dst = edge.src, edge.dst
        src_table = self.table(src)
        if not src_table:
            return
        current = self.table(dst)
        if current is src_table:
            return
        root = self._root_of(dst)
        if not current and (root is None or root == self._root_of(src)
                            or root in _roots_everywhere(src_table)):
            # dst inherits src's table unchanged; share the mapper
            self._tables[dst] = src_table
            return
        pair = (src.base, dst.base)
        updated: Mapper | None = None
        for origin in _added_since(src_table, self._absorbed.get(pair)):
            contrib = self._grow(src_table[origin], root)
            if not contrib:
                continue
            have = current.get(origin)
            if have is contrib or (have is not None and _dominated(contrib, have)):
                continue
            if updated is None:
                updated = Mapper(current)
            updated.added.append(origin)
            updated[origin] = contrib if have is None else minimal_sets(itertools.chain(have, contrib))
        if updated is not None:
            self._tables[dst] = updated
        self._absorbed[pair] = src_table

    def register_origin(self, origin: OriginId, nodes: Iterable[NodeId]) -> None:
        """Seed path_factor 1 (0 for a non-process node) at each origin node."""
        for node in nodes:
            root = self._root_of(node)
            seed: RootSet = frozenset() if root is None else frozenset({root})
            updated = Mapper(self.table(node))
            updated[origin] = minimal_sets(itertools.chain(updated.get(origin, ()), [seed]))
            updated.added.append(origin)
            self._tables[node] = updated
            if origin not in self.origins:
                self.origins[origin] = node

    def to_json(self) -> str:
        return json.dumps(
            {n.label(): {str(o): t.value(o) for o in t} for n, t in self._tables.items()},
            sort_keys=True,
            indent=1,
        )


def _added_since(table: Mapper, earlier: Mapper | None) -> Iterable[OriginId]:
    """Origins whose entry in ``table`` may differ from ``earlier``; all of them
    when ``earlier`` is not on ``table``'s derivation chain."""
    if earlier is None:
        return table
    changed: set[OriginId] = set()
    node: Mapper | None = table
    while node is not earlier:
        if node is None or node.parent is None or len(changed) >= len(table):
            return table
        changed.update(node.added)
        node = node.parent
    return changed


def _roots_everywhere(table: Mapper) -> frozenset[EntityKey]:
    """Roots present in every stored set of every origin (adding one is a no-op)."""
    common: frozenset[EntityKey] | None = None
    for sets in table.values():
        for s in sets:
            common = s if common is None else common & s
            if not common:
                return frozenset()
    return common or frozenset()


# -- oracles ---------------------------------------------------------------


def min_ancestral_cover(g: ProvGraph, path: Iterable[NodeId]) -> int:
    """Size of the smallest process set covering every process on ``path``.

    With fork/exec parentage forming a forest, this is the number of distinct
    tree roots among the path's processes.
    """
    return len({g.root_of(n.base) for n in path if n.kind is EntityKind.PROCESS})


def all_paths(g: ProvGraph, n1: NodeId, n2: NodeId) -> Iterator[list[NodeId]]:
    if n1 == n2:
        yield [n1]
        return
    stack: list[tuple[NodeId, list[NodeId]]] = [(n1, [n1])]
    while stack:
        node, path = stack.pop()
        for nxt in set(g.successors(node)):
            if nxt == n2:
                yield path + [nxt]
            elif nxt not in path:
                stack.append((nxt, path + [nxt]))


def path_factor_oracle(g: ProvGraph, n1: NodeId, n2: NodeId) -> int | None:
    """Minimum ancestral cover over every path n1 -> n2; None when unreachable.

    Enumerates paths explicitly, so only for small graphs.
    """
    best: int | None = None
    for path in all_paths(g, n1, n2):
        m = min_ancestral_cover(g, path)
        if best is None or m < best:
            best = m
    return best

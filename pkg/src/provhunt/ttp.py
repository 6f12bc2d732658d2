"""Declarative TTP rules and the event matcher.

Rules bind their parameters (P, F, S, M, U and primed variants) to the
entities of one event, check a conjunction of predicate atoms, then resolve
each prerequisite clause to an earlier match whose principal process reaches
the bound entity with path_factor <= path_thres.
"""

from __future__ import annotations

import fnmatch
import ipaddress
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import yaml

from .cdr import EntityKey, EntityKind, EntityRef, Event, Family, basename
from .flowtrack import PathFactorTable
from .provgraph import GraphDelta, NodeId, ProvGraph

logger = logging.getLogger(__name__)


class Severity(IntEnum):
    L = 1
    M = 2
    H = 3
    C = 4


class AptStage(IntEnum):
    INITIAL_COMPROMISE = 1
    ESTABLISH_FOOTHOLD = 2
    PRIVILEGE_ESCALATION = 3
    INTERNAL_RECON = 4
    MOVE_LATERALLY = 5
    COMPLETE_MISSION = 6
    CLEANUP_TRACKS = 7

    @property
    def label(self) -> str:
        return _STAGE_LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "AptStage | None":
        return _STAGE_BY_NAME.get(name.lower())


_STAGE_LABELS = {
    AptStage.INITIAL_COMPROMISE: "Initial_Compromise",
    AptStage.ESTABLISH_FOOTHOLD: "Establish_Foothold",
    AptStage.PRIVILEGE_ESCALATION: "Privilege_Escalation",
    AptStage.INTERNAL_RECON: "Internal_Recon",
    AptStage.MOVE_LATERALLY: "Move_Laterally",
    AptStage.COMPLETE_MISSION: "Complete_Mission",
    AptStage.CLEANUP_TRACKS: "Cleanup_Tracks",
}
_STAGE_BY_NAME = {v.lower(): k for k, v in _STAGE_LABELS.items()}
_STAGE_BY_NAME["internal_reconnaissance"] = AptStage.INTERNAL_RECON
_STAGE_BY_NAME["cleanup"] = AptStage.CLEANUP_TRACKS

PARAM_KINDS = {
    "P": EntityKind.PROCESS,
    "F": EntityKind.FILE,
    "S": EntityKind.SOCKET,
    "M": EntityKind.MEMORY,
    "U": EntityKind.USER,
}

ROLES = ("subject", "object", "exe", "process", "parent")

# Socket reads arrive as RECV; a READ rule covers both.
_FAMILY_CLASS = {Family.READ: (Family.READ, Family.RECV)}


class RuleLoadError(ValueError):
    """``kind`` is UnknownList, UnknownFamily, UnboundVariable, BadSeverity,
    UnknownStage, UnknownReference or BadFormat."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)


# -- lists -------------------------------------------------------------------


class ListType(str, Enum):
    IP = "ip"
    PATH = "path"
    NAME = "name"


LIST_TYPES = {
    "Trusted_IP_Addresses": ListType.IP,
    "Internal_IP_Range": ListType.IP,
    "Command_Line_Utilities": ListType.PATH,
    "SuperUser_Tools": ListType.PATH,
    "Sensitive_Files": ListType.PATH,
    "System_Critical_Files": ListType.PATH,
    "Log_Files": ListType.PATH,
    "SuperUser_Group": ListType.NAME,
    "Sensitive_Commands": ListType.NAME,
}


def _list_type(name: str) -> ListType:
    if name in LIST_TYPES:
        return LIST_TYPES[name]
    if "_IP_" in f"_{name}_":
        return ListType.IP
    return ListType.NAME


def _is_pathlike(entry: str) -> bool:
    return entry.startswith("/") or entry[1:3] in (":\\", ":/") or any(c in entry for c in "*?[")


@dataclass
class NamedList:
    name: str
    type: ListType
    entries: tuple[str, ...]
    _nets: tuple[Any, ...] = ()

    def __post_init__(self) -> None:
        if self.type is ListType.IP:
            try:
                self._nets = tuple(ipaddress.ip_network(e, strict=False) for e in self.entries)
            except ValueError as exc:
                raise RuleLoadError("BadFormat", f"list {self.name}: {exc}") from None
        elif self.type is ListType.PATH:
            bad = [e for e in self.entries if not _is_pathlike(e)]
            if bad:
                raise RuleLoadError("BadFormat", f"list {self.name}: not a path or glob: {bad[0]!r}")

    def contains(self, value: str | None) -> bool:
        if value is None:
            return False
        if self.type is ListType.IP:
            try:
                addr = ipaddress.ip_address(value)
            except ValueError:
                return False
            return any(addr in net for net in self._nets)
        if self.type is ListType.PATH:
            return any(fnmatch.fnmatchcase(value, pat) for pat in self.entries)
        return value in self.entries


@dataclass
class ConfigLists:
    lists: dict[str, NamedList] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.lists

    def __getitem__(self, name: str) -> NamedList:
        return self.lists[name]

    @classmethod
    def from_mapping(cls, data: dict[str, Iterable[Any]]) -> "ConfigLists":
        out = cls()
        for name, entries in data.items():
            if not isinstance(entries, list):
                raise RuleLoadError("BadFormat", f"list {name} is not a sequence")
            out.lists[name] = NamedList(name, _list_type(name), tuple(str(e) for e in entries))
        return out


def _default_path(name: str) -> Path:
    return Path(str(resources.files("provhunt") / "data" / name))


DEFAULT_RULES = _default_path("rules.yaml")
DEFAULT_LISTS = _default_path("lists.yaml")


def _load_yaml(path: str | Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise RuleLoadError("BadFormat", f"{path}: {exc}") from None


def load_lists(path: str | Path | None = None) -> ConfigLists:
    data = _load_yaml(path or DEFAULT_LISTS) or {}
    if not isinstance(data, dict):
        raise RuleLoadError("BadFormat", f"{path}: top level must be a mapping")
    return ConfigLists.from_mapping(data)


# -- rules -------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    op: str  # in | not_in | flag
    param: str = ""
    attr: str = ""
    list_name: str = ""
    flag: str = ""

    def describe(self) -> str:
        if self.op == "flag":
            return f"{self.flag} in flags"
        sym = "in" if self.op == "in" else "not in"
        return f"{self.param}.{self.attr} {sym} {self.list_name}"


@dataclass(frozen=True)
class Clause:
    ref: str  # rule name or stage name as written
    param: str
    rule_name: str | None = None
    stage: AptStage | None = None

    @property
    def label(self) -> str:
        return f"{self.ref}->{self.param}"

    def admits(self, rule: "TTPRule") -> bool:
        if self.rule_name is not None:
            return rule.name == self.rule_name
        return rule.stage is self.stage


@dataclass(frozen=True)
class TTPRule:
    name: str
    stage: AptStage
    families: frozenset[Family]
    severity: Severity
    params: tuple[tuple[str, str], ...]  # (param, role) in declaration order
    predicate: tuple[Atom, ...] = ()
    prereqs: tuple[Clause, ...] = ()
    principal: str = "P"

    @property
    def param_roles(self) -> dict[str, str]:
        return dict(self.params)

    @property
    def object_param(self) -> str:
        """First parameter other than the principal; keys the noise model."""
        for p, _ in self.params:
            if p != self.principal:
                return p
        return self.principal


def param_kind(param: str) -> EntityKind | None:
    return PARAM_KINDS.get(param[:1])


@dataclass
class RuleSet:
    rules: list[TTPRule]
    lists: ConfigLists
    by_family: dict[Family, list[TTPRule]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.by_family = {}
        for r in self.rules:
            for fam in r.families:
                for ev_fam in _FAMILY_CLASS.get(fam, (fam,)):
                    self.by_family.setdefault(ev_fam, []).append(r)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def get(self, name: str) -> TTPRule:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def stages(self) -> set[AptStage]:
        return {r.stage for r in self.rules}

    def is_origin_rule(self, rule: TTPRule) -> bool:
        """Whether some prerequisite clause could cite a match of ``rule``."""
        return any(c.admits(rule) for r in self.rules for c in r.prereqs)


def _parse_families(raw: Any, name: str) -> frozenset[Family]:
    items = raw if isinstance(raw, list) else [raw]
    out = set()
    for item in items:
        try:
            out.add(Family(str(item).upper()))
        except ValueError:
            raise RuleLoadError("UnknownFamily", f"rule {name}: {item!r}") from None
    if not out:
        raise RuleLoadError("UnknownFamily", f"rule {name}: empty family")
    return frozenset(out)


def _parse_ref(text: Any, params: dict[str, str], rule: str) -> tuple[str, str]:
    if not isinstance(text, str) or "." not in text:
        raise RuleLoadError("BadFormat", f"rule {rule}: expected Param.attr, got {text!r}")
    param, attr = text.split(".", 1)
    if param not in params:
        raise RuleLoadError("UnboundVariable", f"rule {rule}: {param}")
    return param, attr


def _parse_atom(raw: Any, params: dict[str, str], lists: ConfigLists, rule: str) -> Atom:
    if not isinstance(raw, dict) or len(raw) != 1:
        raise RuleLoadError("BadFormat", f"rule {rule}: bad predicate atom {raw!r}")
    (op, arg), = raw.items()
    if op == "flag":
        return Atom("flag", flag=str(arg))
    if op not in ("in", "not_in"):
        raise RuleLoadError("BadFormat", f"rule {rule}: unknown operator {op!r}")
    if not isinstance(arg, list) or len(arg) != 2:
        raise RuleLoadError("BadFormat", f"rule {rule}: {op} takes [Param.attr, List]")
    param, attr = _parse_ref(arg[0], params, rule)
    list_name = str(arg[1])
    if list_name not in lists:
        raise RuleLoadError("UnknownList", f"rule {rule}: {list_name}")
    return Atom(op, param, attr, list_name)


def _parse_rule(raw: Any, lists: ConfigLists) -> TTPRule:
    if not isinstance(raw, dict) or "name" not in raw:
        raise RuleLoadError("BadFormat", f"rule entry without a name: {raw!r}")
    name = str(raw["name"])
    stage = AptStage.parse(str(raw.get("stage", "")))
    if stage is None:
        raise RuleLoadError("UnknownStage", f"rule {name}: {raw.get('stage')!r}")
    families = _parse_families(raw.get("family"), name)
    try:
        severity = Severity[str(raw.get("severity"))]
    except KeyError:
        raise RuleLoadError("BadSeverity", f"rule {name}: {raw.get('severity')!r}") from None
    raw_params = raw.get("params") or {}
    if not isinstance(raw_params, dict) or not raw_params:
        raise RuleLoadError("BadFormat", f"rule {name}: params must be a non-empty mapping")
    params: dict[str, str] = {}
    for p, role in raw_params.items():
        p = str(p)
        if param_kind(p) is None:
            raise RuleLoadError("BadFormat", f"rule {name}: parameter {p!r} has no known kind")
        if role not in ROLES:
            raise RuleLoadError("BadFormat", f"rule {name}: unknown role {role!r}")
        params[p] = role
    predicate = tuple(_parse_atom(a, params, lists, name) for a in raw.get("predicate") or ())
    prereqs = []
    for c in raw.get("prereqs") or ():
        if not isinstance(c, dict) or "exists" not in c or "to" not in c:
            raise RuleLoadError("BadFormat", f"rule {name}: bad prerequisite {c!r}")
        target = str(c["to"])
        if target not in params:
            raise RuleLoadError("UnboundVariable", f"rule {name}: {target}")
        prereqs.append(Clause(ref=str(c["exists"]), param=target))
    principal = str(raw.get("principal", "P"))
    if principal not in params:
        raise RuleLoadError("UnboundVariable", f"rule {name}: principal {principal}")
    return TTPRule(name, stage, families, severity, tuple(params.items()), predicate,
                   tuple(prereqs), principal)


def _resolve(rules: list[TTPRule]) -> list[TTPRule]:
    names = {r.name for r in rules}
    out = []
    for r in rules:
        clauses = []
        for c in r.prereqs:
            if c.ref in names:
                clauses.append(Clause(c.ref, c.param, rule_name=c.ref))
            elif (stage := AptStage.parse(c.ref)) is not None:
                clauses.append(Clause(c.ref, c.param, stage=stage))
            else:
                raise RuleLoadError("UnknownReference", f"rule {r.name}: {c.ref}")
        out.append(TTPRule(r.name, r.stage, r.families, r.severity, r.params, r.predicate,
                           tuple(clauses), r.principal))
    return out


def parse_rules(doc: Any, lists: ConfigLists) -> RuleSet:
    if isinstance(doc, dict):
        doc = doc.get("rules")
    if not isinstance(doc, list):
        raise RuleLoadError("BadFormat", "expected a list of rules")
    rules = _resolve([_parse_rule(r, lists) for r in doc])
    seen: set[str] = set()
    for r in rules:
        if r.name in seen:
            raise RuleLoadError("BadFormat", f"duplicate rule {r.name}")
        seen.add(r.name)
    return RuleSet(rules, lists)


def load_rules(path: str | Path | None = None, lists: ConfigLists | str | Path | None = None) -> RuleSet:
    if not isinstance(lists, ConfigLists):
        lists = load_lists(lists)
    return parse_rules(_load_yaml(path or DEFAULT_RULES), lists)


# -- matching ----------------------------------------------------------------


@dataclass
class MatchedTTP:
    id: int
    rule: TTPRule
    bindings: dict[str, NodeId]
    entities: dict[str, EntityRef]
    ts: int
    host_id: str
    event_seq: int
    satisfied_prereqs: list[tuple[Clause, int]] = field(default_factory=list)
    witness_rules: tuple[str, ...] = ()
    # graph node each clause was evaluated at, aligned with satisfied_prereqs
    prereq_targets: tuple[NodeId, ...] = ()
    bytes_so_far: int = 0
    status: str = "active"  # active | filtered
    hits: int = 1

    @property
    def key(self) -> tuple[str, tuple[tuple[str, EntityKey], ...]]:
        return self.rule.name, tuple(sorted((p, ref.key) for p, ref in self.entities.items()))

    @property
    def principal(self) -> EntityRef:
        return self.entities[self.rule.principal]

    @property
    def principal_node(self) -> NodeId:
        return self.bindings[self.rule.principal]

    def describe_entities(self) -> dict[str, str]:
        return {p: ref.name for p, ref in self.entities.items()}

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.rule.name,
            "stage": self.rule.stage.label,
            "severity": self.rule.severity.name,
            "entities": self.describe_entities(),
            "bindings": {p: n.label() for p, n in self.bindings.items()},
            "ts": self.ts,
            "host": self.host_id,
            "prereqs": [{"clause": c.label, "witness": w} for c, w in self.satisfied_prereqs],
            "bytes": self.bytes_so_far,
        }


def attr_value(ref: EntityRef, attr: str) -> str | None:
    if attr == "path":
        if ref.kind is EntityKind.FILE:
            return ref.local_id
        return ref.attrs.get("exe_path")
    if attr == "name":
        if ref.kind is EntityKind.PROCESS:
            return basename(ref.attrs.get("exe_path", ""))
        return basename(ref.local_id)
    if attr in ("id", "uid") and ref.kind is EntityKind.USER:
        return ref.attrs.get("uid", ref.local_id)
    if attr == "id":
        return ref.local_id
    return ref.attrs.get(attr)


@dataclass
class _Role:
    ref: EntityRef
    pre: NodeId | None  # version before the event
    post: NodeId


class Matcher:
    """Evaluates a RuleSet against events; owns the matched-TTP store."""

    def __init__(self, rules: RuleSet, graph: ProvGraph, pft: PathFactorTable):
        self.rules = rules
        self.graph = graph
        self.pft = pft
        self.by_key: dict[tuple, MatchedTTP] = {}
        self.by_id: dict[int, MatchedTTP] = {}
        self._next_id = 1

    @property
    def path_thres(self) -> int:
        return self.pft.path_thres

    def _role(self, ref: EntityRef, delta: GraphDelta, spawned: bool = False) -> _Role | None:
        post = self.graph.current_node(ref.key)
        if post is None:
            return None
        if ref.key not in delta.pre:
            return _Role(ref, post, post)  # untouched by the event
        pre = delta.pre[ref.key]
        if pre is None:
            # a process created by this event inherits through its creation
            # edges; any other new entity had no dependencies before the event
            pre = post if spawned else None
        return _Role(ref, pre, post)

    def _roles(self, e: Event, delta: GraphDelta) -> dict[str, _Role]:
        g = self.graph
        roles: dict[str, _Role | None] = {
            "subject": self._role(g.entity(e.subject.key), delta),
            "object": self._role(g.entity(e.object.key), delta),
        }
        if e.family in (Family.FORK, Family.EXEC):
            roles["object"] = roles["process"] = self._role(g.entity(e.object.key), delta, spawned=True)
            parent = g.parent_of(e.object.key) if e.object.key == e.subject.key else e.subject.key
            if parent is not None:
                roles["parent"] = self._role(g.entity(parent), delta)
        if e.family is Family.EXEC:
            exe = EntityRef(EntityKind.FILE, e.host_id, e.object.attrs.get("exe_path", ""), {})
            roles["exe"] = self._role(exe, delta)
        return {k: v for k, v in roles.items() if v is not None}

    def _check_atom(self, atom: Atom, bound: dict[str, _Role], e: Event) -> bool:
        if atom.op == "flag":
            return atom.flag in e.flags
        value = attr_value(bound[atom.param].ref, atom.attr)
        hit = self.rules.lists[atom.list_name].contains(value)
        return hit if atom.op == "in" else not hit

    def eval_prereq(self, clause: Clause, target: NodeId) -> MatchedTTP | None:
        """Earliest (ts, id) active match admitted by ``clause`` reaching ``target``."""
        table = self.pft.table(target)
        if not table:
            return None

        def rank(origin):
            t = self.by_id.get(origin)
            if t is None or not clause.admits(t.rule):
                return None
            return (t.ts, t.id)

        best = table.least(clause, rank)
        if best is None:
            return None
        t = self.by_id[best[1]]
        # only active matches register as origins, and they never revert
        assert t.status == "active"
        return t

    def _bind(self, rule: TTPRule, roles: dict[str, _Role]) -> dict[str, _Role] | None:
        bound = {}
        for p, role in rule.params:
            r = roles.get(role)
            if r is None or r.ref.kind is not param_kind(p):
                return None
            bound[p] = r
        return bound

    def match_event(self, e: Event, delta: GraphDelta) -> list[tuple[MatchedTTP, bool]]:
        """Rules satisfied by ``e``. Returns (match, is_new) pairs; repeats of an
        earlier (rule, bindings) match accumulate bytes on that match."""
        candidates = self.rules.by_family.get(e.family)
        if not candidates:
            return []
        roles = self._roles(e, delta)
        out: list[tuple[MatchedTTP, bool]] = []
        for rule in candidates:
            bound = self._bind(rule, roles)
            if bound is None:
                continue
            if not all(self._check_atom(a, bound, e) for a in rule.predicate):
                continue
            witnesses: list[MatchedTTP] = []
            targets: list[NodeId] = []
            for clause in rule.prereqs:
                target = bound[clause.param].pre
                w = None if target is None else self.eval_prereq(clause, target)
                if w is None:
                    break
                witnesses.append(w)
                targets.append(target)
            else:
                out.append(self._record(rule, bound, witnesses, targets, e))
        return out

    def _record(self, rule: TTPRule, bound: dict[str, _Role], witnesses: list[MatchedTTP],
                targets: list[NodeId], e: Event) -> tuple[MatchedTTP, bool]:
        entities = {p: r.ref for p, r in bound.items()}
        key = (rule.name, tuple(sorted((p, ref.key) for p, ref in entities.items())))
        existing = self.by_key.get(key)
        if existing is not None:
            existing.bytes_so_far += e.bytes
            existing.hits += 1
            return existing, False
        t = MatchedTTP(
            id=self._next_id,
            rule=rule,
            bindings={p: r.post for p, r in bound.items()},
            entities=entities,
            ts=e.ts,
            host_id=e.host_id,
            event_seq=e.seq,
            satisfied_prereqs=[(c, w.id) for c, w in zip(rule.prereqs, witnesses)],
            witness_rules=tuple(w.rule.name for w in witnesses),
            prereq_targets=tuple(targets),
            bytes_so_far=e.bytes,
        )
        self._next_id += 1
        self.by_key[key] = t
        self.by_id[t.id] = t
        logger.debug("matched %s #%d at seq %d", rule.name, t.id, e.seq)
        return t, True

"""Benign-behaviour model used to suppress routine TTP matches.

A match is suppressed when training saw the same (subject executable, rule,
object pattern, witness rules) combination and the bytes moved between the
match's subject and object so far do not exceed the most seen in training.
"""

from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple

from .cdr import EntityKind, EntityRef
from .ttp import MatchedTTP

MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class NoiseKey(NamedTuple):
    subject_exe: str
    rule: str
    object_pattern: str
    prereq_signature: tuple[str, ...]


@dataclass
class NoiseEntry:
    key: NoiseKey
    byte_threshold: int = 0
    hit_count: int = 0


def object_pattern(ref: EntityRef) -> str:
    if ref.kind is EntityKind.FILE:
        return ref.local_id
    if ref.kind is EntityKind.SOCKET:
        ip = ref.attrs.get("ip", "")
        try:
            prefix = 24 if ipaddress.ip_address(ip).version == 4 else 64
            net = str(ipaddress.ip_network(f"{ip}/{prefix}", strict=False))
        except ValueError:
            net = ip
        return f"{net}:{ref.attrs.get('port', '')}"
    if ref.kind is EntityKind.PROCESS:
        return ref.attrs.get("exe_path", ref.local_id)
    if ref.kind is EntityKind.USER:
        return f"uid:{ref.attrs.get('uid', ref.local_id)}"
    return ref.kind.value


def noise_key(t: MatchedTTP) -> NoiseKey:
    subj = t.principal
    obj = t.entities[t.rule.object_param]
    exe = subj.attrs.get("exe_path") or subj.local_id
    return NoiseKey(exe, t.rule.name, object_pattern(obj), tuple(t.witness_rules))


def pair_of(t: MatchedTTP) -> tuple:
    """(subject base, object base) whose cumulative bytes gate filtering."""
    return (t.principal.key, t.entities[t.rule.object_param].key)


@dataclass
class NoiseModel:
    entries: dict[NoiseKey, NoiseEntry] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    min_count: int = 1

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, key: NoiseKey) -> NoiseEntry | None:
        e = self.entries.get(key)
        if e is None or e.hit_count < self.min_count:
            return None
        return e


def learn(benign_matches: Iterable[tuple[MatchedTTP, int]], meta: dict[str, Any] | None = None,
          min_count: int = 1, model: NoiseModel | None = None) -> NoiseModel:
    """Fold (match, cumulative pair bytes) observations into a model."""
    m = model if model is not None else NoiseModel(meta=dict(meta or {}), min_count=min_count)
    for t, nbytes in benign_matches:
        key = noise_key(t)
        entry = m.entries.get(key)
        if entry is None:
            entry = m.entries[key] = NoiseEntry(key)
        entry.byte_threshold = max(entry.byte_threshold, int(nbytes))
        entry.hit_count += 1
    return m


def should_filter(t: MatchedTTP, cumulative_bytes: int, m: NoiseModel) -> bool:
    entry = m.lookup(noise_key(t))
    return entry is not None and cumulative_bytes <= entry.byte_threshold


def model_to_json(m: NoiseModel) -> dict[str, Any]:
    return {
        "version": MODEL_VERSION,
        "meta": m.meta,
        "min_count": m.min_count,
        "entries": [
            {
                "subject_exe": e.key.subject_exe,
                "rule": e.key.rule,
                "object_pattern": e.key.object_pattern,
                "prereq_signature": list(e.key.prereq_signature),
                "byte_threshold": e.byte_threshold,
                "hit_count": e.hit_count,
            }
            for e in sorted(m.entries.values(), key=lambda e: e.key)
        ],
    }


def model_from_json(doc: Any) -> NoiseModel:
    if not isinstance(doc, dict) or doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version') if isinstance(doc, dict) else None!r}")
    m = NoiseModel(meta=dict(doc.get("meta") or {}), min_count=int(doc.get("min_count", 1)))
    try:
        for raw in doc["entries"]:
            key = NoiseKey(str(raw["subject_exe"]), str(raw["rule"]), str(raw["object_pattern"]),
                           tuple(str(s) for s in raw["prereq_signature"]))
            threshold, hits = int(raw["byte_threshold"]), int(raw["hit_count"])
            if threshold < 0 or not all(key[:3]):
                raise ModelFormatError(f"invalid entry {raw!r}")
            m.entries[key] = NoiseEntry(key, threshold, hits)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"bad entry: {exc}") from None
    return m


def save_model(m: NoiseModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_json(m), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_model(path: str | Path) -> NoiseModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    return model_from_json(doc)

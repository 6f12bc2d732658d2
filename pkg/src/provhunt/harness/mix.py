"""Merging benign and attack streams with a ground-truth sidecar."""

from __future__ import annotations

import heapq
import json
from dataclasses import replace
from pathlib import Path
from typing import Iterable

from ..cdr import EventStream
from .scenario import LabeledStream


def _labeled(stream: EventStream, default: tuple[str, str, str]) -> Iterable[tuple]:
    labels = getattr(stream, "labels", None)
    for i, e in enumerate(stream):
        yield e, (labels[i] if labels else default)


def interleave(benign: EventStream, attack: EventStream) -> LabeledStream:
    """Merge by (ts, host, original seq), renumbering seq from 1.

    Labels travel with their events; an unlabeled input counts as benign
    (first argument) or attack (second argument).
    """
    streams = [
        ((e.ts, e.host_id, 0, e.seq), e, lab)
        for e, lab in _labeled(benign, ("benign", "", ""))
    ], [
        ((e.ts, e.host_id, 1, e.seq), e, lab)
        for e, lab in _labeled(attack, ("attack", "", ""))
    ]
    merged = heapq.merge(*streams, key=lambda r: r[0])
    events, labels = [], []
    for n, (_, e, lab) in enumerate(merged, 1):
        events.append(replace(e, seq=n))
        labels.append(lab)
    return LabeledStream(source="interleaved", events=events, labels=labels)


def ground_truth(stream: LabeledStream) -> list[dict]:
    return [
        {"seq": e.seq, "label": lab, "scenario": scen, "stage": stage}
        for e, (lab, scen, stage) in zip(stream.events or [], stream.labels)
        if lab != "benign"
    ]


def attack_seqs(stream: LabeledStream) -> set[int]:
    return {row["seq"] for row in ground_truth(stream)}


def write_ground_truth(stream: LabeledStream, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in ground_truth(stream):
            fh.write(json.dumps(row, sort_keys=True) + "\n")

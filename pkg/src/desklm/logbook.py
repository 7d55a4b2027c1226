"""Append-only structured run log: one JSON record per line.

The first record is a header carrying the schema version and the complete
effective configuration, so a run is reconstructible from its logbook alone.
Step records carry enough (loss, lr, scale, norms) that replaying them
rebuilds the LR and loss-scale time series exactly.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

SCHEMA_VERSION = 1

EVENT_KINDS = (
    "header",
    "step",
    "validation",
    "checkpoint",
    "divergence",
    "restart",
    "fault",
    "override",
    "complete",
)


@dataclass
class LogbookEvent:
    ts: float
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"ts": self.ts, "kind": self.kind, **self.payload}, sort_keys=True)


class Logbook:
    """Writes events to a JSONL file (if given a path) and keeps them in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.events: list[LogbookEvent] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, **payload) -> LogbookEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown logbook event kind {kind!r}")
        event = LogbookEvent(ts=time.time(), kind=kind, payload=payload)
        self.events.append(event)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(event.to_json() + "\n")
        return event

    def of_kind(self, kind: str) -> list[LogbookEvent]:
        return [e for e in self.events if e.kind == kind]


def read_events(path: str | Path) -> list[LogbookEvent]:
    events = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ts = rec.pop("ts")
            kind = rec.pop("kind")
            events.append(LogbookEvent(ts=ts, kind=kind, payload=rec))
    return events


def replay_series(events: Iterable[LogbookEvent]) -> list[tuple[int, float, float]]:
    """Reconstruct the (step, lr, scale) time series from step events."""
    return [
        (e.payload["step"], e.payload["lr"], e.payload["scale"])
        for e in events
        if e.kind == "step"
    ]

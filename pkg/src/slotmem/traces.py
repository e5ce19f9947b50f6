"""Slot access traces: record, serialize, validate, aggregate.

A trace is a line-delimited sequence of JSON records
``{t, layer, head, kind, slot, weight}`` with kind "read" or "write".
Within one (layer, head) stream the step index never decreases; loaders
enforce that plus field sanity and raise ``TraceFormatError`` otherwise.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import TraceFormatError

TRACE_KINDS = ("read", "write")


@dataclass(frozen=True)
class TraceEvent:
    t: int
    layer: int
    head: int
    kind: str
    slot: int
    weight: float

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise TraceFormatError(f"kind must be one of {TRACE_KINDS}, got {self.kind!r}")
        if self.t < 0 or self.layer < 0 or self.head < 0 or self.slot < 0:
            raise TraceFormatError("t, layer, head and slot must be nonnegative")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise TraceFormatError(f"weight must be finite and nonnegative, got {self.weight}")


def validate_trace(events) -> None:
    """Check the per-(layer, head) time monotonicity invariant."""
    last: dict = defaultdict(lambda: -1)
    for ev in events:
        key = (ev.layer, ev.head)
        if ev.t < last[key]:
            raise TraceFormatError(
                f"t decreases within layer {ev.layer} head {ev.head}: "
                f"{last[key]} -> {ev.t}"
            )
        last[key] = ev.t


def save_trace(path, events) -> None:
    validate_trace(events)
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(asdict(ev)) + "\n")


def load_trace(path) -> list:
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                events.append(
                    TraceEvent(
                        t=int(obj["t"]),
                        layer=int(obj["layer"]),
                        head=int(obj["head"]),
                        kind=obj["kind"],
                        slot=int(obj["slot"]),
                        weight=float(obj["weight"]),
                    )
                )
            except TraceFormatError:
                raise
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise TraceFormatError(f"{path}:{lineno}: bad trace record: {exc}") from exc
    validate_trace(events)
    return events


def slot_histogram(events) -> dict:
    """Total touches per slot, reads and writes together."""
    return dict(Counter(ev.slot for ev in events))


def heatmap(events, n_slots: int | None = None, layer: int | None = None,
            head: int | None = None):
    """(slot x time) access-count grids, one per kind.

    Returns ``(reads, writes)`` integer arrays of shape (n_slots, n_steps).
    An empty selection yields empty (0, 0) grids. Grid sums equal the
    number of selected events of each kind.
    """
    sel = [
        ev
        for ev in events
        if (layer is None or ev.layer == layer) and (head is None or ev.head == head)
    ]
    if not sel:
        return np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0), dtype=np.int64)
    n_steps = max(ev.t for ev in sel) + 1
    if n_slots is None:
        n_slots = max(ev.slot for ev in sel) + 1
    reads = np.zeros((n_slots, n_steps), dtype=np.int64)
    writes = np.zeros((n_slots, n_steps), dtype=np.int64)
    for ev in sel:
        if ev.slot >= n_slots:
            raise TraceFormatError(f"slot {ev.slot} outside grid of {n_slots} slots")
        (reads if ev.kind == "read" else writes)[ev.slot, ev.t] += 1
    return reads, writes


def export_heatmap_csv(path, events, n_slots: int | None = None,
                       layer: int | None = None, head: int | None = None) -> None:
    """Write the heatmap as CSV rows (slot, t, reads, writes), zeros skipped."""
    reads, writes = heatmap(events, n_slots=n_slots, layer=layer, head=head)
    with open(path, "w") as fh:
        fh.write("slot,t,reads,writes\n")
        nz = np.argwhere((reads + writes) > 0)
        for slot, t in nz:
            fh.write(f"{slot},{t},{reads[slot, t]},{writes[slot, t]}\n")

"""Slot-sorted batched execution of sparse memory event streams.

Because the decay is diagonal, each slot's (S, z) chain depends only on the
events that touch that slot. Sorting the full read/write event stream by
slot therefore turns the sequential recurrence into independent per-slot
scans whose total work is the event count, never capacity x steps. Outputs
are reassembled per time step with a fixed reduction order (ascending slot
id) so results are bit-reproducible no matter which order the per-slot
scans ran in.

A step's write lands before the same step's read, so events are keyed by
(t, phase) with phase 0 = write, 1 = read; within one slot that pair is
strictly increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import SparseAddress
from .errors import ConfigError
from .memory import DEFAULT_EPS, decay_factors

WRITE_PHASE = 0
READ_PHASE = 1


@dataclass(frozen=True)
class SegmentEvent:
    """One sparse touch of one slot.

    ``ref`` is the step index: the row of the value matrix for writes, the
    row of the output matrix for reads.
    """

    t: int
    phase: int
    slot: int
    weight: float
    ref: int

    def __post_init__(self):
        if self.phase not in (WRITE_PHASE, READ_PHASE):
            raise ConfigError(f"phase must be 0 (write) or 1 (read), got {self.phase}")
        if self.t < 0 or self.slot < 0 or self.ref < 0:
            raise ConfigError("t, slot and ref must be nonnegative")


@dataclass
class SlotSegment:
    """All events touching one slot, ordered by (t, phase)."""

    slot: int
    events: list = field(default_factory=list)

    def validate(self) -> None:
        last = (-1, -1)
        for ev in self.events:
            if ev.slot != self.slot:
                raise ConfigError(f"event slot {ev.slot} inside segment for slot {self.slot}")
            key = (ev.t, ev.phase)
            if key <= last:
                raise ConfigError(f"out-of-order event at t={ev.t} phase={ev.phase} slot={ev.slot}")
            last = key


def events_from_steps(write_addrs, read_addrs) -> list:
    """Flatten per-step sparse addresses into one event stream.

    Step ``t`` contributes its write entries (value row ``t``) then its read
    entries (output row ``t``).
    """
    if len(write_addrs) != len(read_addrs):
        raise ConfigError("write and read address streams differ in length")
    events = []
    for t, (wa, ra) in enumerate(zip(write_addrs, read_addrs)):
        for slot, w in zip(wa.indices.tolist(), wa.weights.tolist()):
            events.append(SegmentEvent(t=t, phase=WRITE_PHASE, slot=slot, weight=w, ref=t))
        for slot, r in zip(ra.indices.tolist(), ra.weights.tolist()):
            events.append(SegmentEvent(t=t, phase=READ_PHASE, slot=slot, weight=r, ref=t))
    return events


def build_segments(events) -> list:
    """Stable-sort events by (slot, t, phase) and group into per-slot segments."""
    ordered = sorted(events, key=lambda ev: (ev.slot, ev.t, ev.phase))
    segments: list[SlotSegment] = []
    for ev in ordered:
        if not segments or segments[-1].slot != ev.slot:
            segments.append(SlotSegment(slot=ev.slot))
        segments[-1].events.append(ev)
    for seg in segments:
        seg.validate()
    return segments


def run_segments(
    segments,
    values: np.ndarray,
    n_steps: int,
    capacity: int,
    gamma: float = 1.0,
    eps: float = DEFAULT_EPS,
    initial_slots: np.ndarray | None = None,
    initial_mass: np.ndarray | None = None,
):
    """Scan every segment independently, then reduce read contributions.

    Returns ``(outputs, slots, mass)``: per-step read results plus the final
    memory state. Contributions to a step's output are summed in ascending
    slot order in a separate pass, so permuting the segment list changes
    nothing, bit for bit.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError(f"values must be (steps, value_dim), got shape {values.shape}")
    value_dim = values.shape[1]
    slots = (
        np.zeros((capacity, value_dim))
        if initial_slots is None
        else np.array(initial_slots, dtype=np.float64)
    )
    mass = (
        np.full(capacity, 1.0 / capacity)
        if initial_mass is None
        else np.array(initial_mass, dtype=np.float64)
    )
    if slots.shape != (capacity, value_dim) or mass.shape != (capacity,):
        raise ConfigError("initial state shape does not match capacity/value_dim")

    contributions = []
    for seg in segments:
        seg.validate()
        if not 0 <= seg.slot < capacity:
            raise ConfigError(f"slot {seg.slot} outside capacity {capacity}")
        s_row = slots[seg.slot].copy()
        z = float(mass[seg.slot])
        for ev in seg.events:
            if ev.ref >= n_steps:
                raise ConfigError(f"event ref {ev.ref} outside {n_steps} steps")
            if ev.phase == WRITE_PHASE:
                d = float(decay_factors(ev.weight, gamma))
                s_row = d * s_row + ev.weight * values[ev.ref]
                z = d * z + ev.weight
            else:
                contributions.append((ev.ref, seg.slot, ev.weight * s_row / (z + eps)))
        slots[seg.slot] = s_row
        mass[seg.slot] = z

    outputs = np.zeros((n_steps, value_dim))
    for ref, _slot, vec in sorted(contributions, key=lambda c: (c[0], c[1])):
        outputs[ref] += vec
    return outputs, slots, mass

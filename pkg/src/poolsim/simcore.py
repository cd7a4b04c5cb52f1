"""Deterministic discrete-event kernel.

Events run in (time, seq) order.  GPUs are FIFO compute resources; each
owner's link egress is shared evenly by its active flows, and the shares are
recomputed whenever a flow starts or finishes.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

DEFAULT_MAX_EVENTS = 50_000_000


class SimulationAbort(RuntimeError):
    """Safety-bound violation: clock regression, runaway queue, or deadlock."""


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    callback: Callable[..., None] | None = field(compare=False, repr=False)
    args: tuple = field(compare=False, default=(), repr=False)
    rank: int = field(compare=False, default=-1)
    payload: Any = field(compare=False, default=None)
    cancelled: bool = field(compare=False, default=False)


class Simulator:
    def __init__(self, *, trace: bool = False, max_events: int = DEFAULT_MAX_EVENTS,
                 max_queue: int = 1_000_000):
        self.now = 0.0
        self._queue: list[Event] = []
        self._seq = 0
        self.trace_enabled = trace
        self.trace: list[tuple] = []
        self.max_events = max_events
        self.max_queue = max_queue
        self.events_processed = 0

    def at(self, time: float, kind: str, callback, *args, rank: int = -1, payload=None) -> Event:
        if time < self.now:
            raise SimulationAbort(f"event {kind!r} scheduled at {time} before now={self.now}")
        ev = Event(time, self._seq, kind, callback, args, rank, payload)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        if len(self._queue) > self.max_queue:
            raise SimulationAbort(f"event queue exceeded {self.max_queue} entries")
        return ev

    def after(self, delay: float, kind: str, callback, *args, rank: int = -1, payload=None) -> Event:
        return self.at(self.now + max(0.0, delay), kind, callback, *args, rank=rank, payload=payload)

    @staticmethod
    def cancel(ev: Event | None) -> None:
        if ev is not None:
            ev.cancelled = True

    def run_until_idle(self) -> float:
        queue = self._queue
        while queue:
            ev = heapq.heappop(queue)
            if ev.cancelled:
                continue
            if ev.time < self.now:
                raise SimulationAbort(f"clock would move backward: {ev.time} < {self.now}")
            self.now = ev.time
            self.events_processed += 1
            if self.events_processed > self.max_events:
                raise SimulationAbort(f"more than {self.max_events} events processed")
            if self.trace_enabled:
                self.trace.append((ev.time, ev.seq, ev.kind, ev.rank, ev.payload))
            if ev.callback is not None:
                ev.callback(*ev.args)
        return self.now

    def trace_lines(self) -> list[str]:
        return [json.dumps({"time": repr(t), "seq": s, "kind": k, "rank": r, "payload": p},
                           sort_keys=True, default=str)
                for t, s, k, r, p in self.trace]


class GpuResource:
    """Serialized compute on one rank (a TP group counts as one executor)."""

    def __init__(self, sim: Simulator, rank: int):
        self.sim = sim
        self.rank = rank
        self.busy_until = 0.0
        self.busy_time = 0.0

    def submit(self, duration: float, kind: str, callback, *args, payload=None) -> Event:
        start = max(self.sim.now, self.busy_until)
        self.busy_until = start + duration
        self.busy_time += duration
        return self.sim.at(self.busy_until, kind, callback, *args, rank=self.rank, payload=payload)


@dataclass
class LinkFlow:
    owner_rank: int
    reader_rank: int
    nbytes: float
    started_at: float
    on_done: Callable[["LinkFlow"], None] | None = field(repr=False, default=None)
    bytes_remaining: float = 0.0
    delivered: float = 0.0
    rate: float = 0.0
    finished_at: float | None = None
    flow_id: int = 0
    kind: str = "weight"
    tag: Any = None


# residue below this (bytes) at completion is floating-point dust
_SNAP = 1e-3


class Link:
    """One owner's egress; active flows share ``bandwidth`` evenly."""

    def __init__(self, sim: Simulator, owner: int, bandwidth: float, *, shared: bool = True,
                 ledger: list | None = None):
        self.sim = sim
        self.owner = owner
        self.bandwidth = bandwidth
        self.shared = shared
        self.active: list[LinkFlow] = []
        self._last = 0.0
        self._next: Event | None = None
        self.peak_readers = 0
        self.peak_by_kind: dict[str, int] = {}
        self.ledger = ledger if ledger is not None else []
        self.max_snap = 0.0

    def _settle(self) -> None:
        dt = self.sim.now - self._last
        if dt > 0:
            for f in self.active:
                moved = min(f.rate * dt, f.bytes_remaining)
                f.bytes_remaining -= moved
                f.delivered += moved
        self._last = self.sim.now

    def _reschedule(self) -> None:
        Simulator.cancel(self._next)
        self._next = None
        if not self.active:
            return
        rate = self.bandwidth / len(self.active) if self.shared else self.bandwidth
        for f in self.active:
            f.rate = rate
        soonest = min(f.bytes_remaining for f in self.active) / rate
        self._next = self.sim.after(soonest, "flow_progress", self._on_progress, rank=self.owner)

    def start(self, reader: int, nbytes: float, on_done, kind: str = "weight",
              tag=None) -> LinkFlow:
        if nbytes <= 0:
            raise ValueError("flows must carry a positive byte count")
        self._settle()
        flow = LinkFlow(self.owner, reader, float(nbytes), self.sim.now, on_done,
                        bytes_remaining=float(nbytes), flow_id=len(self.ledger),
                        kind=kind, tag=tag)
        self.ledger.append(flow)
        self.active.append(flow)
        self.peak_readers = max(self.peak_readers, len(self.active))
        same = sum(1 for f in self.active if f.kind == kind)
        self.peak_by_kind[kind] = max(self.peak_by_kind.get(kind, 0), same)
        self._reschedule()
        return flow

    def _on_progress(self) -> None:
        self._next = None
        self._settle()
        # a residue the clock cannot resolve any more also counts as done
        tick = 4 * math.ulp(self.sim.now)
        done = [f for f in self.active
                if f.bytes_remaining <= max(_SNAP, 1e-12 * f.nbytes, f.rate * tick)]
        for f in done:
            self.max_snap = max(self.max_snap, f.bytes_remaining)
            f.delivered = f.nbytes
            f.bytes_remaining = 0.0
            f.finished_at = self.sim.now
            self.active.remove(f)
        self._reschedule()
        for f in done:
            if f.on_done is not None:
                f.on_done(f)


class Network:
    """All owner links of one node plus the shared flow ledger."""

    def __init__(self, sim: Simulator, ranks: int, bandwidth: float, *, shared: bool = True):
        self.sim = sim
        self.ledger: list[LinkFlow] = []
        self.links = [Link(sim, r, bandwidth, shared=shared, ledger=self.ledger)
                      for r in range(ranks)]

    def start_flow(self, owner: int, reader: int, nbytes: float, on_done,
                   kind: str = "weight", tag=None) -> LinkFlow:
        return self.links[owner].start(reader, nbytes, on_done, kind, tag)

    def peak_readers(self, kind: str | None = None) -> list[int]:
        if kind is None:
            return [link.peak_readers for link in self.links]
        return [link.peak_by_kind.get(kind, 0) for link in self.links]

    def max_residual(self) -> float:
        """Largest byte residue snapped to zero at a flow completion."""
        return max((link.max_snap for link in self.links), default=0.0)

    def bytes_moved(self) -> float:
        return math.fsum(f.delivered for f in self.ledger)

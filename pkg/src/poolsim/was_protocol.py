"""Weight-as-a-Service: layer ownership, cache slots and prefetch scheduling.

Each rank owns the FFN weights of layers ``l`` with ``l % d == rank``.  For
every other layer it streams the weights from the owner into one of a few
pre-allocated slots before computing, and releases the slot once compute is
done.  The prefetch order staggers ranks inside each ``d``-layer cycle so
that, at any step, every owner is read by a different rank.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .simcore import GpuResource, Network, SimulationAbort, Simulator


class ProtocolViolation(SimulationAbort):
    """A slot was used or moved outside its legal state sequence."""


def owner_of(layer: int, d: int) -> int:
    """Rank that stores the FFN weights of ``layer``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if layer < 0:
        raise ValueError("layer must be non-negative")
    return layer % d


@dataclass(frozen=True)
class OwnershipMap:
    num_layers: int
    d: int

    def owner(self, layer: int) -> int:
        if not 0 <= layer < self.num_layers:
            raise ValueError(f"layer {layer} outside [0, {self.num_layers})")
        return owner_of(layer, self.d)

    def owned_by(self, rank: int) -> list[int]:
        return list(range(rank, self.num_layers, self.d))

    def counts(self) -> list[int]:
        return [len(self.owned_by(r)) for r in range(self.d)]


class SlotState(enum.Enum):
    FREE = "free"
    RESERVED = "reserved"
    FILLING = "filling"
    READY = "ready"
    IN_USE = "in_use"


NEXT_STATE = {
    SlotState.FREE: SlotState.RESERVED,
    SlotState.RESERVED: SlotState.FILLING,
    SlotState.FILLING: SlotState.READY,
    SlotState.READY: SlotState.IN_USE,
    SlotState.IN_USE: SlotState.FREE,
}


def is_legal_transition(src: SlotState, dst: SlotState) -> bool:
    return NEXT_STATE[src] is dst


@dataclass
class CacheSlot:
    slot_id: int
    state: SlotState = SlotState.FREE
    layer: int | None = None
    pass_index: int | None = None
    ready_at: float | None = None


def peak_shift_order(rank: int, cycle_start: int, d: int,
                     num_layers: int | None = None) -> list[int]:
    """Prefetch order of one rank within the cycle starting at ``cycle_start``.

    The walk starts at the rank's own offset, wraps inside the cycle and skips
    the self-owned layer.  In a truncated last cycle of ``m < d`` layers, ranks
    with ``rank >= m`` start at the first layer of the cycle.
    """
    if not 0 <= rank < d:
        raise ValueError(f"rank {rank} outside [0, {d})")
    if cycle_start % d:
        raise ValueError("cycle_start must be a multiple of d")
    m = d if num_layers is None else min(d, num_layers - cycle_start)
    if m <= 0:
        return []
    start = rank if rank < m else 0
    walk = (cycle_start + (start + k) % m for k in range(m))
    return [layer for layer in walk if layer % d != rank]


def natural_order(rank: int, cycle_start: int, d: int,
                  num_layers: int | None = None) -> list[int]:
    """Unshifted order: every rank walks the cycle from its first layer."""
    m = d if num_layers is None else min(d, num_layers - cycle_start)
    return [cycle_start + k for k in range(max(m, 0)) if (cycle_start + k) % d != rank]


@dataclass(frozen=True)
class PrefetchPlan:
    rank: int
    layers: tuple[int, ...]
    lookahead_window: int

    def slots_required(self, num_layers: int, d: int) -> int:
        """Fewest slots that let compute in layer order consume this plan without deadlock."""
        pos = {layer: i for i, layer in enumerate(self.layers)}
        need, consumed = 0, 0
        for layer in range(num_layers):
            if layer % d == self.rank:
                continue
            need = max(need, pos[layer] - consumed + 1)
            consumed += 1
        return need


def build_prefetch_plan(rank: int, num_layers: int, d: int, lookahead: int,
                        peak_shifting: bool = True) -> PrefetchPlan:
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    order = peak_shift_order if peak_shifting else natural_order
    layers: list[int] = []
    for c in range(0, num_layers, d):
        layers.extend(order(rank, c, d, num_layers))
    return PrefetchPlan(rank, tuple(layers), lookahead)


@dataclass
class SlotAudit:
    """Online checker for slot transitions with per-rank, time-weighted occupancy."""

    slot_count: int
    keep_log: bool = False
    transitions: int = 0
    illegal: int = 0
    max_occupied: int = 0
    occupied: dict[int, int] = field(default_factory=dict)
    histogram: dict[int, float] = field(default_factory=dict)
    log: list[tuple] = field(default_factory=list)
    _last_t: dict[int, float] = field(default_factory=dict)

    def record(self, now: float, rank: int, slot: CacheSlot, dst: SlotState) -> None:
        held = self.occupied.get(rank, 0)
        self.histogram[held] = self.histogram.get(held, 0.0) + now - self._last_t.get(rank, 0.0)
        self._last_t[rank] = now
        self.transitions += 1
        if not is_legal_transition(slot.state, dst):
            self.illegal += 1
        if slot.state is SlotState.FREE:
            held += 1
        elif dst is SlotState.FREE:
            held -= 1
        self.occupied[rank] = held
        self.max_occupied = max(self.max_occupied, held)
        if self.keep_log:
            self.log.append((now, rank, slot.slot_id, slot.state.value, dst.value, slot.layer))


def validate_slot_log(log: list[tuple], slot_count: int) -> list[str]:
    """Replay a transition log; returns human-readable problems (empty if clean)."""
    problems = []
    states: dict[tuple[int, int], SlotState] = {}
    busy: dict[int, int] = {}
    for now, rank, slot_id, src, dst, layer in log:
        key = (rank, slot_id)
        cur = states.get(key, SlotState.FREE)
        src_s, dst_s = SlotState(src), SlotState(dst)
        if cur is not src_s:
            problems.append(f"t={now}: rank {rank} slot {slot_id} recorded {src} but was {cur.value}")
        if not is_legal_transition(src_s, dst_s):
            problems.append(f"t={now}: rank {rank} slot {slot_id} illegal {src}->{dst}")
        if src_s is SlotState.FREE:
            busy[rank] = busy.get(rank, 0) + 1
        elif dst_s is SlotState.FREE:
            busy[rank] = busy.get(rank, 0) - 1
        if busy.get(rank, 0) > slot_count:
            problems.append(f"t={now}: rank {rank} has {busy[rank]} occupied slots")
        states[key] = dst_s
    return problems


class WasRank:
    """Per-rank WaS runtime: slots, a single copy stream and the housekeeper.

    The plan repeats every forward pass; weights are never kept across passes.
    Reserved slots queue on the copy stream, which moves one layer at a time.
    """

    def __init__(self, sim: Simulator, net: Network, gpu: GpuResource, rank: int, d: int,
                 num_layers: int, slot_count: int, layer_bytes: float, *,
                 peak_shifting: bool = True, lookahead: int | None = None,
                 audit: SlotAudit | None = None):
        self.sim = sim
        self.net = net
        self.gpu = gpu
        self.rank = rank
        self.d = d
        self.num_layers = num_layers
        self.layer_bytes = layer_bytes
        lookahead = slot_count if lookahead is None else min(lookahead, slot_count)
        self.plan = build_prefetch_plan(rank, num_layers, d, lookahead, peak_shifting)
        need = self.plan.slots_required(num_layers, d)
        if self.plan.layers and need > slot_count:
            raise ValueError(f"rank {rank}: prefetch order needs {need} slots, "
                             f"only {slot_count} configured")
        self.slots = [CacheSlot(i) for i in range(slot_count)]
        self.audit = audit if audit is not None else SlotAudit(slot_count)
        self._cursor = 0          # next plan entry to reserve (counts across passes)
        self._queue: deque[CacheSlot] = deque()
        self._copying: CacheSlot | None = None
        self._by_key: dict[tuple[int, int], CacheSlot] = {}
        self._waiter: tuple[int, int, Callable[[], None]] | None = None
        self.stall_s = 0.0
        self.bytes_fetched = 0.0
        self.enabled = bool(self.plan.layers)
        self.suspended = False
        self._min_pass = 0

    # -- slot state machine -------------------------------------------------
    def _move(self, slot: CacheSlot, dst: SlotState) -> None:
        self.audit.record(self.sim.now, self.rank, slot, dst)
        if not is_legal_transition(slot.state, dst):
            raise ProtocolViolation(
                f"rank {self.rank} slot {slot.slot_id}: {slot.state.value} -> {dst.value}")
        slot.state = dst
        if self.sim.trace_enabled:
            self.sim.trace.append((self.sim.now, -1, "slot_" + dst.value, self.rank,
                                   {"slot": slot.slot_id, "layer": slot.layer}))

    def in_flight(self) -> int:
        return sum(1 for s in self.slots if s.state is not SlotState.FREE)

    def pump(self) -> None:
        """Reserve free slots for upcoming plan entries and keep the copy stream busy."""
        if not self.enabled or self.suspended:
            return
        n = len(self.plan.layers)
        while self.in_flight() < self.plan.lookahead_window:
            slot = next((s for s in self.slots if s.state is SlotState.FREE), None)
            if slot is None:
                break
            pass_index, pos = divmod(self._cursor, n)
            self._cursor += 1
            slot.layer, slot.pass_index, slot.ready_at = self.plan.layers[pos], pass_index, None
            self._move(slot, SlotState.RESERVED)
            self._by_key[(pass_index, slot.layer)] = slot
            self._queue.append(slot)
        if self._copying is None and self._queue and not self.suspended:
            slot = self._queue.popleft()
            self._copying = slot
            self._move(slot, SlotState.FILLING)
            self.net.start_flow(owner_of(slot.layer, self.d), self.rank, self.layer_bytes,
                                self._on_filled, kind="weight", tag=slot)

    def _on_filled(self, flow) -> None:
        slot = flow.tag
        self._copying = None
        self.bytes_fetched += flow.nbytes
        slot.ready_at = self.sim.now
        self._move(slot, SlotState.READY)
        if slot.pass_index < self._min_pass:
            self._discard(slot)
        if self._waiter is not None and self._waiter[:2] == (slot.pass_index, slot.layer):
            _, _, resume = self._waiter
            self._waiter = None
            resume()
        self.pump()

    # -- mode changes --------------------------------------------------------
    def suspend(self) -> None:
        """Stop issuing prefetches (the group left WaS mode)."""
        self.suspended = True

    def resume(self, pass_index: int) -> None:
        """Re-enter WaS at ``pass_index``; older prefetches are drained through the slot cycle."""
        self.suspended = False
        if pass_index <= self._min_pass:
            self.pump()
            return
        self._min_pass = pass_index
        self._cursor = max(self._cursor, pass_index * len(self.plan.layers))
        for slot in self.slots:
            if slot.pass_index is not None and slot.pass_index < pass_index \
                    and slot.state is SlotState.READY:
                self._discard(slot)
        stale = [s for s in self._queue if s.pass_index < pass_index]
        for slot in stale:
            # never started: run through the cycle without moving bytes
            self._queue.remove(slot)
            self._move(slot, SlotState.FILLING)
            self._move(slot, SlotState.READY)
            self._discard(slot)
        self.pump()

    def _discard(self, slot: CacheSlot) -> None:
        self._by_key.pop((slot.pass_index, slot.layer), None)
        self._move(slot, SlotState.IN_USE)
        self._move(slot, SlotState.FREE)
        slot.layer = slot.pass_index = None

    # -- compute side -------------------------------------------------------
    def run_layer(self, pass_index: int, layer: int, duration: float,
                  on_done: Callable[[], None]) -> None:
        """Compute ``layer`` once its weights are local; ``on_done`` fires at compute end."""
        if owner_of(layer, self.d) == self.rank:
            self.gpu.submit(duration, "layer_done", on_done, payload=layer)
            return
        wanted_at = max(self.sim.now, self.gpu.busy_until)
        slot = self._by_key.get((pass_index, layer))

        def launch() -> None:
            s = self._by_key.pop((pass_index, layer))
            if s.state is not SlotState.READY:
                raise ProtocolViolation(
                    f"rank {self.rank}: layer {layer} computed from a {s.state.value} slot")
            self.stall_s += max(0.0, self.sim.now - wanted_at)
            self._move(s, SlotState.IN_USE)

            def release() -> None:
                self._move(s, SlotState.FREE)
                s.layer = s.pass_index = None
                self.pump()
                on_done()

            self.gpu.submit(duration, "layer_done", release, payload=layer)

        if slot is not None and slot.state is SlotState.READY:
            launch()
            return
        if slot is None and self.in_flight() >= len(self.slots):
            raise SimulationAbort(f"rank {self.rank}: layer {layer} has no slot and none are free")
        self._waiter = (pass_index, layer, launch)
        self.pump()


def step_was_layer(rank_state: WasRank, pass_index: int, layer: int, duration: float,
                   on_done: Callable[[], None]) -> None:
    """Run one layer in WaS mode on ``rank_state``."""
    rank_state.run_layer(pass_index, layer, duration, on_done)

"""Compute-as-a-Service, the FSDP-style baseline, and WaS/CaS mode switching.

In CaS mode non-owners ship their activations to a layer's owner, which runs
the FFN for everyone and sends the outputs back.  Layers therefore become
rendezvous points between ranks.  The FSDP baseline instead all-gathers each
layer's weights on every rank behind a barrier.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .catalog import ModePolicy
from .simcore import GpuResource, Network, Simulator
from .timing import CostModel, layer_ffn_time, p2p_time
from .was_protocol import ProtocolViolation, owner_of

__all__ = ["ActivationChunk", "ModeDirective", "ModePolicy", "CasLayer", "FsdpLayer",
           "decide_mode", "step_cas_layer", "step_fsdp_layer", "fsdp_gather_time"]

WAS, CAS = "was", "cas"


@dataclass(frozen=True)
class ActivationChunk:
    source_rank: int
    rows: float
    dummy: bool = False


@dataclass(frozen=True)
class ModeDirective:
    mode: str
    effective_from_iter: int

    def __post_init__(self):
        if self.mode not in (WAS, CAS):
            raise ValueError(f"unknown mode {self.mode!r}")


def decide_mode(policy: ModePolicy, recent: Mapping[int, Sequence[float]], current: str,
                dwell: int, next_iter: int = 0) -> ModeDirective | None:
    """Mode decision at a window boundary.

    ``recent`` maps each engine to its scheduled rows over the window (drained
    engines report zeros).  The statistic is the largest per-engine mean, so
    CaS engages only when every engine is small.
    """
    if not recent or any(len(v) == 0 for v in recent.values()):
        raise ValueError("decide_mode needs a populated window")
    if policy.b_threshold is None:
        raise ValueError("policy has no b_threshold")
    stat = max(statistics.fmean(v) for v in recent.values())
    if dwell < policy.min_dwell_iters:
        return None
    if current == WAS and stat < policy.b_threshold:
        return ModeDirective(CAS, next_iter)
    if current == CAS and stat > policy.b_threshold * policy.hysteresis_ratio:
        return ModeDirective(WAS, next_iter)
    return None


# ---------------------------------------------------------------------------
# CaS


@dataclass
class CasContext:
    """Shared handles for CaS layers in one simulated group."""

    sim: Simulator
    net: Network
    gpus: Sequence[GpuResource]
    cm: CostModel
    flags: frozenset[str]
    routing_overhead: float
    d: int

    @property
    def latency(self) -> float:
        return self.cm.hw.p2p_latency

    def chunk_bytes(self, rows: float) -> float:
        return rows * self.cm.stats.hidden_size * self.cm.stats.dtype_bytes


@dataclass
class CasLayer:
    """Rendezvous for one (iteration, layer) in CaS mode."""

    ctx: CasContext
    iteration: int
    layer: int
    expected: set[int]
    arrived: list[tuple[ActivationChunk, Callable[[], None]]] = field(default_factory=list)
    started: bool = False

    @property
    def owner(self) -> int:
        return owner_of(self.layer, self.ctx.d)

    def withdraw(self, rank: int) -> None:
        """Rank turned out to be a skipped dummy for this iteration."""
        self.expected.discard(rank)
        self._maybe_compute()

    def contribute(self, chunk: ActivationChunk, on_output: Callable[[], None]) -> None:
        """Chunk has reached the owner; ``on_output`` fires when its result is back at the source."""
        if chunk.source_rank not in self.expected:
            raise ProtocolViolation(f"unexpected chunk from rank {chunk.source_rank} "
                                    f"for layer {self.layer}")
        self.expected.discard(chunk.source_rank)
        self.arrived.append((chunk, on_output))
        self._maybe_compute()

    def _maybe_compute(self) -> None:
        if self.started or self.expected or not self.arrived:
            return
        self.started = True
        ctx = self.ctx
        gpu = ctx.gpus[self.owner]
        if "gemm_fusion" in ctx.flags:
            rows = sum(c.rows for c, _ in self.arrived)
            batch = [list(self.arrived)]
            durations = [layer_ffn_time(rows, ctx.cm)]
        else:
            batch = [[item] for item in self.arrived]
            durations = [layer_ffn_time(c.rows, ctx.cm) for c, _ in self.arrived]
        for group, dur in zip(batch, durations):
            gpu.submit(dur, "cas_gemm", self._scatter, group,
                       payload={"layer": self.layer, "chunks": len(group)})

    def _scatter(self, group) -> None:
        ctx = self.ctx
        for chunk, on_output in group:
            if chunk.source_rank == self.owner:
                on_output()
                continue
            ctx.net.start_flow(self.owner, chunk.source_rank, ctx.chunk_bytes(chunk.rows),
                               _after(ctx.sim, ctx.latency, on_output), kind="activation",
                               tag=("out", self.layer))


def _after(sim: Simulator, delay: float, fn: Callable[[], None]):
    def done(_flow=None) -> None:
        if delay > 0:
            sim.after(delay, "p2p_arrive", fn)
        else:
            fn()
    return done


def step_cas_layer(ctx: CasContext, rendezvous: CasLayer, rank: int, rows: float,
                   attn_time: float, on_done: Callable[[], None], *,
                   dummy: bool = False) -> None:
    """Run ``rank``'s part of one CaS layer.

    Local attention first, then the chunk travels to the owner (asynchronously
    or by blocking the sender), and ``on_done`` fires when the FFN output is
    back.  Skipped dummies must call ``rendezvous.withdraw`` instead.
    """
    if dummy and "dummy_skip" in ctx.flags:
        raise ValueError("skipped dummies do not run CaS layers")
    owner = rendezvous.owner
    chunk = ActivationChunk(rank, rows, dummy)
    gpu = ctx.gpus[rank]

    def after_attention() -> None:
        if rank == owner:
            rendezvous.contribute(chunk, on_done)
            return
        nbytes = ctx.chunk_bytes(rows)
        arrive = lambda: rendezvous.contribute(chunk, on_done)  # noqa: E731
        if "async_p2p" in ctx.flags:
            ctx.net.start_flow(rank, owner, nbytes, _after(ctx.sim, ctx.latency, arrive),
                               kind="activation", tag=("in", rendezvous.layer))
        else:
            gpu.submit(p2p_time(rows, ctx.cm) + ctx.latency, "p2p_send", arrive)

    gpu.submit(attn_time + ctx.routing_overhead, "cas_attn", after_attention,
               payload={"layer": rendezvous.layer})


# ---------------------------------------------------------------------------
# FSDP baseline


def fsdp_gather_time(cm: CostModel, d: int) -> float:
    """Ring all-gather of one layer's FFN shard set."""
    if d <= 1:
        return 0.0
    return (d - 1) / d * cm.ffn_bytes_gpu / cm.hw.link_bandwidth


@dataclass
class FsdpLayer:
    """Lockstep barrier for one (iteration, layer) of the FSDP baseline."""

    sim: Simulator
    gpus: Sequence[GpuResource]
    cm: CostModel
    d: int
    layer: int
    expected: set[int]
    waiting: dict[int, tuple[float, float, Callable[[], None]]] = field(default_factory=dict)
    stall: dict[int, float] = field(default_factory=dict)

    def arrive(self, rank: int, duration: float, on_done: Callable[[], None]) -> None:
        if rank not in self.expected:
            raise ProtocolViolation(f"rank {rank} is not part of this all-gather")
        self.expected.discard(rank)
        self.waiting[rank] = (self.sim.now, duration, on_done)
        self._maybe_release()

    def withdraw(self, rank: int) -> None:
        self.expected.discard(rank)
        self._maybe_release()

    def _maybe_release(self) -> None:
        if self.expected or not self.waiting:
            return
        gather = fsdp_gather_time(self.cm, self.d)
        now = self.sim.now
        for rank in sorted(self.waiting):
            arrived, duration, on_done = self.waiting[rank]
            self.stall[rank] = now - arrived
            gpu = self.gpus[rank]
            gpu.submit(gather + duration, "fsdp_layer", on_done, payload={"layer": self.layer})
        self.waiting = {}


def step_fsdp_layer(barrier: FsdpLayer, rank: int, duration: float,
                    on_done: Callable[[], None]) -> None:
    """Join the layer barrier; the gather and local compute follow once all ranks arrive."""
    barrier.arrive(rank, duration, on_done)

"""Continuous-batching engines and the group runtime that drives every execution mode.

Each DP replica is one engine (its TP group acts as a single executor).  An
engine admits requests under full-length KV reservation, runs one decode
iteration per step, and hands the per-layer work to the active protocol:
local compute, WaS streaming, CaS shipping or the FSDP all-gather.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Protocol

from .capacity import kv_capacity
from .catalog import FORMAT_VERSION, LayoutStrategy, Scenario, WeightMode, WorkloadSpec
from .cas_protocol import (CAS, WAS, CasContext, CasLayer, FsdpLayer, decide_mode,
                           step_cas_layer, step_fsdp_layer)
from .simcore import GpuResource, Network, Simulator
from .timing import DEFAULT_CONTEXT, CostModel, iter_decode_time, switch_threshold
from .was_protocol import SlotAudit, WasRank, step_was_layer


class RequestState(str, enum.Enum):
    WAITING = "waiting"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    DONE = "done"
    FAILED = "failed"


@dataclass
class Request:
    id: int
    prompt_len: int
    output_len: int
    state: RequestState = RequestState.WAITING
    generated: int = 0
    diagnostic: str = ""

    @property
    def reservation(self) -> int:
        return self.prompt_len + self.output_len

    @property
    def context(self) -> int:
        return self.prompt_len + self.generated


@dataclass
class EngineState:
    engine_id: int
    ranks: tuple[int, ...]
    kv_capacity_tokens: int
    queue: deque = field(default_factory=deque)
    active: list = field(default_factory=list)
    kv_used_tokens: int = 0
    iteration: int = 0
    is_dummy_this_iter: bool = False
    max_concurrent: int | None = None
    failed: list = field(default_factory=list)
    generated_tokens: int = 0

    @property
    def live_batch(self) -> int:
        return sum(1 for r in self.active if r.state is RequestState.DECODING)

    @property
    def has_work(self) -> bool:
        return bool(self.active or self.queue)


def shard_workload(workload: WorkloadSpec | list[tuple[int, int]], engines: int) -> list[list[Request]]:
    """Round-robin assignment of requests (by index) to ``engines`` queues."""
    if engines < 1:
        raise ValueError("engines must be >= 1")
    pairs = workload.materialize() if isinstance(workload, WorkloadSpec) else list(workload)
    shards: list[list[Request]] = [[] for _ in range(engines)]
    for i, (prompt, output) in enumerate(pairs):
        shards[i % engines].append(Request(i, prompt, output))
    return shards


def admit(engine: EngineState) -> list[Request]:
    """FCFS admission with full prompt+output KV reservation."""
    admitted = []
    while engine.queue:
        req = engine.queue[0]
        if req.reservation > engine.kv_capacity_tokens:
            engine.queue.popleft()
            req.state = RequestState.FAILED
            req.diagnostic = (f"needs {req.reservation} KV tokens, engine capacity is "
                              f"{engine.kv_capacity_tokens}")
            engine.failed.append(req)
            continue
        if engine.kv_used_tokens + req.reservation > engine.kv_capacity_tokens:
            break
        if engine.max_concurrent is not None and len(engine.active) >= engine.max_concurrent:
            break
        engine.queue.popleft()
        req.state = RequestState.PREFILLING
        engine.kv_used_tokens += req.reservation
        engine.active.append(req)
        admitted.append(req)
    return admitted


@dataclass(frozen=True)
class Work:
    """Rows scheduled on one engine for one iteration.

    Context sums are token-weighted so that ``ctx / rows`` is the mean context.
    """

    decode_rows: float
    decode_ctx: float
    prefill_tokens: float = 0.0
    prefill_ctx: float = 0.0
    dummy: bool = False
    prefill_seqs: int = 0

    @property
    def rows(self) -> float:
        return self.decode_rows + self.prefill_tokens

    @property
    def live_batch(self) -> float:
        """Sequences in flight, the quantity the mode controller watches."""
        return self.decode_rows + self.prefill_seqs

    def scaled(self, f: float) -> "Work":
        return Work(self.decode_rows * f, self.decode_ctx * f, self.prefill_tokens * f,
                    self.prefill_ctx * f, self.dummy, self.prefill_seqs)


DUMMY_WORK = Work(1, 1, dummy=True)


class BatchSource(Protocol):
    def next_work(self, engine: int, iteration: int) -> Work | None: ...

    def finish(self, engine: int, iteration: int, work: Work, mode: str) -> int: ...


class JobSource:
    """Request lifecycle for a real offline job."""

    def __init__(self, engines: list[EngineState]):
        self.engines = engines
        self.tokens_by_mode: dict[str, int] = {}

    def next_work(self, engine: int, iteration: int) -> Work | None:
        eng = self.engines[engine]
        eng.iteration = iteration
        admit(eng)
        if not eng.active:
            eng.is_dummy_this_iter = True
            return None
        eng.is_dummy_this_iter = False
        dec = [r for r in eng.active if r.state is RequestState.DECODING]
        pre = [r for r in eng.active if r.state is RequestState.PREFILLING]
        return Work(len(dec), float(sum(r.context for r in dec)),
                    float(sum(r.prompt_len for r in pre)),
                    sum(r.prompt_len * r.prompt_len / 2 for r in pre), prefill_seqs=len(pre))

    def finish(self, engine: int, iteration: int, work: Work, mode: str) -> int:
        eng = self.engines[engine]
        produced = 0
        still = []
        for req in eng.active:
            if req.state is RequestState.PREFILLING:
                req.state = RequestState.DECODING
            elif req.state is RequestState.DECODING:
                req.generated += 1
                produced += 1
            if req.generated >= req.output_len:
                req.state = RequestState.DONE
                eng.kv_used_tokens -= req.reservation
            else:
                still.append(req)
        eng.active = still
        eng.generated_tokens += produced
        self.tokens_by_mode[mode] = self.tokens_by_mode.get(mode, 0) + produced
        return produced


class FixedBatchSource:
    """Constant per-engine batch for a fixed number of iterations (per-iteration timing)."""

    def __init__(self, rows: int, s_ctx: float, iterations: int):
        self.work = Work(rows, float(rows) * s_ctx)
        self.iterations = iterations
        self.tokens_by_mode: dict[str, int] = {}

    def next_work(self, engine: int, iteration: int) -> Work | None:
        return self.work if iteration < self.iterations else None

    def finish(self, engine: int, iteration: int, work: Work, mode: str) -> int:
        n = int(work.decode_rows)
        self.tokens_by_mode[mode] = self.tokens_by_mode.get(mode, 0) + n
        return n


@dataclass
class IterRecord:
    engine: int
    iteration: int
    start: float
    end: float
    rows: float
    mode: str
    stall: float
    dummy: bool


def threshold_context(scenario: Scenario) -> float:
    """Mean decode context of the workload, used when deriving B_th for a job."""
    wl = scenario.workload
    return wl.prompt_len.mean + wl.output_len.mean / 2


class GroupRuntime:
    """One simulated node: ``dp`` engines plus the orchestrator."""

    def __init__(self, scenario: Scenario, source: BatchSource, *, trace: bool = False,
                 link_contention: bool = True, keep_slot_log: bool = False,
                 b_threshold: int | None = None, threshold_ctx: float = DEFAULT_CONTEXT,
                 max_events: int = 50_000_000):
        self.scenario = scenario
        self.source = source
        layout = scenario.layout
        self.layout = layout
        self.stats = scenario.stats
        self.cm = CostModel(self.stats, scenario.hardware, layout)
        self.d = layout.dp
        self.L = self.stats.num_layers
        self.sim = Simulator(trace=trace, max_events=max_events)
        self.net = Network(self.sim, self.d, scenario.hardware.link_bandwidth,
                           shared=link_contention)
        self.gpus = [GpuResource(self.sim, r) for r in range(self.d)]
        self.policy = scenario.mode_policy
        wm = layout.weight_mode
        self.audit = SlotAudit(layout.was_slot_count, keep_log=keep_slot_log)
        self.was: list[WasRank] = []
        if wm is WeightMode.SIDP:
            self.was = [WasRank(self.sim, self.net, self.gpus[r], r, self.d, self.L,
                                layout.was_slot_count, self.cm.ffn_bytes_gpu,
                                peak_shifting=layout.peak_shifting, audit=self.audit)
                        for r in range(self.d)]
            if self.policy.mode == "auto":
                self.b_threshold = b_threshold or self.policy.b_threshold or \
                    switch_threshold(self.cm, self.d, threshold_ctx)
            else:
                self.b_threshold = b_threshold or self.policy.b_threshold
            initial = CAS if self.policy.mode == CAS else WAS
        elif wm is WeightMode.FSDP:
            initial, self.b_threshold = "fsdp", None
        else:
            initial, self.b_threshold = "local", None
        self.directives: list[tuple[int, str]] = [(0, initial)]
        self.cas_ctx = CasContext(self.sim, self.net, self.gpus, self.cm,
                                  frozenset(scenario.ablation_flags),
                                  self.policy.cas_routing_overhead, self.d)
        self.next_iter = [0] * self.d
        self.completed = [0] * self.d
        self.parked: list[int | None] = [None] * self.d
        self.drained = [False] * self.d
        self.max_started = -1
        self.records: list[IterRecord] = []
        self.rows_hist: list[dict[int, float]] = [{} for _ in range(self.d)]
        self._windows_checked = 0
        self._rv: dict[tuple[int, int], CasLayer] = {}
        self._fsdp: dict[tuple[int, int], FsdpLayer] = {}
        self._cost_cache: dict[Work, tuple[float, float]] = {}

    # -- modes ---------------------------------------------------------------
    def mode_for(self, iteration: int) -> str:
        mode = self.directives[0][1]
        for start, m in self.directives:
            if start <= iteration:
                mode = m
        return mode

    def _needs_dummy(self, mode: str) -> bool:
        if mode == "fsdp":
            return True
        return mode == CAS and "dummy_skip" not in self.cas_ctx.flags

    def _costs(self, work: Work) -> tuple[float, float]:
        """(local layer time, attention-only time) per layer for ``work``."""
        hit = self._cost_cache.get(work)
        if hit is not None:
            return hit
        cm = self.cm
        parts = [(work.decode_rows, work.decode_ctx), (work.prefill_tokens, work.prefill_ctx)]
        local = attn = cm.tp_sync_time()
        for rows, ctx in parts:
            if rows > 0:
                local += cm.layer_time(rows, ctx / rows)
                attn += cm.attn_time(rows, ctx / rows)
        self._cost_cache[work] = (local, attn)
        return local, attn

    def local_iteration_time(self, work: Work) -> float:
        """Whole iteration for independent layouts, pipeline bubbles included."""
        pp = self.layout.pp
        m = self.layout.micro_batches or 1
        F = self.scenario.hardware.framework_overhead
        if pp == 1:
            return F + self.L * self._costs(work)[0]
        stage = self.cm.layers_per_stage * self._costs(work.scaled(1 / m))[0]
        return F + (m + pp - 1) * stage

    # -- iteration loop -----------------------------------------------------
    def run(self) -> float:
        for e in range(self.d):
            self._start_iteration(e)
        return self.sim.run_until_idle()

    def _start_iteration(self, e: int) -> None:
        it = self.next_iter[e]
        mode = self.mode_for(it)
        work = None if self.drained[e] else self.source.next_work(e, it)
        if work is None:
            self.drained[e] = True
            if all(self.drained) or not self._needs_dummy(mode):
                self._park(e, it)
                return
            work = DUMMY_WORK
        self.max_started = max(self.max_started, it)
        start = self.sim.now
        stall0 = self.was[e].stall_s if mode == WAS else 0.0
        busy0 = self.gpus[e].busy_time
        fsdp_stall = [0.0]

        def finish() -> None:
            end = self.sim.now
            if mode == WAS:
                stall = self.was[e].stall_s - stall0
            elif mode == CAS:
                stall = max(0.0, (end - start) - (self.gpus[e].busy_time - busy0))
            else:
                stall = fsdp_stall[0]
            self.records.append(IterRecord(e, it, start, end, work.rows, mode, stall, work.dummy))
            if not work.dummy:
                self.source.finish(e, it, work, mode)
                self.rows_hist[e][it] = work.live_batch
            self.next_iter[e] = it + 1
            self.completed[e] = it + 1
            if (it & 15) == 0:
                self._collect()
            self._maybe_decide()
            self._start_iteration(e)

        if mode == "local":
            self.gpus[e].submit(self.local_iteration_time(work), "iteration", finish,
                                payload={"engine": e, "iter": it})
            return
        local, attn = self._costs(work)
        if mode == CAS and self.was:
            self.was[e].suspend()

        def step(layer: int) -> None:
            if layer == self.L:
                finish()
                return
            nxt = lambda: step(layer + 1)  # noqa: E731
            if mode == WAS:
                step_was_layer(self.was[e], it, layer, local, nxt)
            elif mode == CAS:
                step_cas_layer(self.cas_ctx, self._rendezvous(it, layer), e, work.rows, attn,
                               nxt, dummy=work.dummy)
            else:
                barrier = self._barrier(it, layer)

                def done() -> None:
                    fsdp_stall[0] += barrier.stall.get(e, 0.0)
                    nxt()
                step_fsdp_layer(barrier, e, local, done)

        self.gpus[e].submit(self.scenario.hardware.framework_overhead, "iter_start",
                            step, 0, payload={"engine": e, "iter": it})
        if mode == WAS:
            self.was[e].resume(it)

    def _participants(self, it: int) -> set[int]:
        return {r for r in range(self.d) if self.parked[r] is None or self.parked[r] > it}

    def _rendezvous(self, it: int, layer: int) -> CasLayer:
        key = (it, layer)
        rv = self._rv.get(key)
        if rv is None:
            rv = self._rv[key] = CasLayer(self.cas_ctx, it, layer, self._participants(it))
        return rv

    def _collect(self) -> None:
        """Drop rendezvous objects of iterations every engine has finished."""
        low = min(self.next_iter)
        for table in (self._rv, self._fsdp):
            for key in [k for k in table if k[0] < low - 1]:
                del table[key]

    def _barrier(self, it: int, layer: int) -> FsdpLayer:
        key = (it, layer)
        b = self._fsdp.get(key)
        if b is None:
            b = self._fsdp[key] = FsdpLayer(self.sim, self.gpus, self.cm, self.d, layer,
                                            self._participants(it))
        return b

    def _park(self, e: int, it: int) -> None:
        self.parked[e] = it
        for table in (self._rv, self._fsdp):
            for (i, _), obj in sorted(table.items()):
                if i >= it and e in obj.expected:
                    obj.withdraw(e)
        self._maybe_decide()

    def _wake(self, from_iter: int) -> None:
        for e in range(self.d):
            if self.parked[e] is not None and not all(self.drained):
                self.parked[e] = None
                self.next_iter[e] = max(self.next_iter[e], from_iter)
                self.sim.after(0.0, "wake", self._start_iteration, e, rank=e)

    # -- orchestrator -------------------------------------------------------
    def _maybe_decide(self) -> None:
        if self.policy.mode != "auto" or not self.was:
            return
        live = [e for e in range(self.d) if self.parked[e] is None]
        if not live:
            return
        W = self.policy.window_iters
        cmin = min(self.completed[e] for e in live)
        while (self._windows_checked + 1) * W <= cmin:
            w0 = self._windows_checked * W
            self._windows_checked += 1
            recent = {e: [self.rows_hist[e].get(i, 0.0) for i in range(w0, w0 + W)]
                      for e in range(self.d)}
            since, current = self.directives[-1]
            nxt = max(self.max_started + 1, since)
            directive = decide_mode(self.policy_with_threshold, recent, current,
                                    w0 + W - since, nxt)
            if directive is not None:
                self.directives.append((directive.effective_from_iter, directive.mode))
                if self._needs_dummy(directive.mode):
                    self._wake(directive.effective_from_iter)

    @property
    def policy_with_threshold(self):
        if self.policy.b_threshold == self.b_threshold:
            return self.policy
        return replace(self.policy, b_threshold=self.b_threshold)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class JobReport:
    scenario: str
    seed: int
    feasible: bool
    makespan: float = 0.0
    total_tokens: int = 0
    throughput: float = 0.0
    expected_tokens: int = 0
    kv_tokens_per_engine: int = 0
    b_threshold: int | None = None
    iterations: list[IterRecord] = field(default_factory=list)
    peak_readers: list[int] = field(default_factory=list)
    mode_timeline: list[tuple[str, int, int]] = field(default_factory=list)
    tokens_by_mode: dict[str, int] = field(default_factory=dict)
    iteration_share: dict[str, float] = field(default_factory=dict)
    switch_count: int = 0
    stall_by_rank: list[float] = field(default_factory=list)
    slot_occupancy: dict[int, float] = field(default_factory=dict)
    slot_transitions: int = 0
    slot_illegal: int = 0
    slot_max_occupied: int = 0
    bytes_moved: float = 0.0
    max_flow_residual: float = 0.0
    scaling_efficiency: float = 0.0
    failed_requests: list[dict] = field(default_factory=list)
    diagnostic: str = ""
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        doc = {k: v for k, v in self.__dict__.items() if k != "iterations"}
        doc["mode_timeline"] = [list(t) for t in self.mode_timeline]
        doc["slot_occupancy"] = {str(k): v for k, v in sorted(self.slot_occupancy.items())}
        doc["iterations"] = [r.__dict__ for r in self.iterations]
        return doc

    def summary(self) -> str:
        if not self.feasible:
            return f"{self.scenario}: infeasible ({self.diagnostic})"
        modes = ",".join(f"{m}={n}" for m, n in sorted(self.tokens_by_mode.items()))
        return (f"{self.scenario}: throughput={self.throughput:.1f} tok/s "
                f"makespan={self.makespan:.3f} s tokens={self.total_tokens} "
                f"switches={self.switch_count} modes[{modes}]")


def build_job(scenario: Scenario, **runtime_kw) -> tuple[GroupRuntime | None, JobSource | None, object]:
    """Wire engines, requests and the runtime; runtime is None when memory does not fit."""
    mem = kv_capacity(scenario)
    if not mem.feasible or mem.kv_tokens_per_engine <= 0:
        return None, None, mem
    layout = scenario.layout
    per_engine = layout.tp * layout.pp
    engines = []
    for e, shard in enumerate(shard_workload(scenario.workload, layout.dp)):
        engines.append(EngineState(e, tuple(range(e * per_engine, (e + 1) * per_engine)),
                                   int(mem.kv_tokens_per_engine), deque(shard),
                                   max_concurrent=layout.max_concurrent))
    source = JobSource(engines)
    runtime_kw.setdefault("threshold_ctx", threshold_context(scenario))
    return GroupRuntime(scenario, source, **runtime_kw), source, mem


def _mode_timeline(rt: GroupRuntime, last_iter: int) -> list[tuple[str, int, int]]:
    spans = []
    ds = [(s, m) for s, m in rt.directives if s <= last_iter]
    for i, (start, mode) in enumerate(ds):
        end = ds[i + 1][0] - 1 if i + 1 < len(ds) else last_iter
        if spans and spans[-1][0] == mode:
            spans[-1] = (mode, spans[-1][1], end)
        elif end >= start:
            spans.append((mode, start, end))
    return spans


def single_replica_token_time(scenario: Scenario, rows: float, s_ctx: float) -> float:
    """Per-token decode time of one unsharded replica on one GPU (memory ignored)."""
    cm = CostModel(scenario.stats, scenario.hardware, LayoutStrategy())
    rows = max(rows, 1.0)
    return iter_decode_time(rows, s_ctx, cm).total_s / rows


def run_job(scenario: Scenario, **runtime_kw) -> JobReport:
    """Simulate the whole offline job and summarize it."""
    rt, source, mem = build_job(scenario, **runtime_kw)
    seed = scenario.workload.seed
    if rt is None:
        return JobReport(scenario.name, seed, False, diagnostic=(
            f"no KV budget left per GPU (weights {mem.weight_bytes_per_gpu / 1e9:.1f} GB, "
            f"buffers {mem.cache_slot_bytes_per_gpu / 1e9:.1f} GB)"))
    rt.run()
    return make_report(rt, source)


def make_report(rt: GroupRuntime, source: JobSource) -> JobReport:
    scenario = rt.scenario
    live = [r for r in rt.records if not r.dummy]
    makespan = max((r.end for r in live), default=0.0)
    tokens = sum(e.generated_tokens for e in source.engines)
    failed = [r for e in source.engines for r in e.failed]
    expected = sum(p[1] for p in scenario.workload.materialize()) - sum(r.output_len for r in failed)
    last_iter = max((r.iteration for r in live), default=0)
    timeline = _mode_timeline(rt, last_iter)
    share: dict[str, float] = {}
    for mode, a, b in timeline:
        share[mode] = share.get(mode, 0.0) + (b - a + 1) / (last_iter + 1)
    switches = sum(1 for i in range(1, len(timeline)) if timeline[i][0] != timeline[i - 1][0])
    stall = [0.0] * rt.d
    for r in rt.records:
        stall[r.engine] += r.stall
    throughput = tokens / makespan if makespan > 0 else 0.0
    alpha = 0.0
    if live and tokens:
        mean_rows = sum(r.rows for r in live) / len(live)
        ref = single_replica_token_time(scenario, mean_rows, threshold_context(scenario))
        alpha = scenario.layout.gpus * (makespan / tokens) / ref
    return JobReport(
        scenario=scenario.name, seed=scenario.workload.seed, feasible=True,
        makespan=makespan, total_tokens=tokens, throughput=throughput,
        expected_tokens=expected, kv_tokens_per_engine=source.engines[0].kv_capacity_tokens,
        b_threshold=rt.b_threshold, iterations=rt.records,
        peak_readers=rt.net.peak_readers("weight"), mode_timeline=timeline,
        tokens_by_mode=dict(sorted(source.tokens_by_mode.items())), iteration_share=share,
        switch_count=switches, stall_by_rank=stall, slot_occupancy=dict(rt.audit.histogram),
        slot_transitions=rt.audit.transitions, slot_illegal=rt.audit.illegal,
        slot_max_occupied=rt.audit.max_occupied, bytes_moved=rt.net.bytes_moved(),
        max_flow_residual=rt.net.max_residual(), scaling_efficiency=alpha,
        failed_requests=[{"id": r.id, "diagnostic": r.diagnostic} for r in failed])


# ---------------------------------------------------------------------------
# Fixed-batch iteration timing


@dataclass(frozen=True)
class IterationMeasure:
    mode: str
    batch: int
    iter_time: float
    stall: float
    peak_readers: int


def measure_iteration(scenario: Scenario, batch: int, mode: str, *,
                      s_ctx: float = DEFAULT_CONTEXT, iterations: int = 8,
                      warmup: int = 3) -> IterationMeasure:
    """Steady-state per-iteration time with every engine holding ``batch`` rows.

    ``mode`` is ``replicated``, ``was``, ``cas`` or ``auto``; ``auto`` picks
    CaS below the switch threshold, as the orchestrator does at steady state.
    """
    layout = scenario.layout
    if mode == "replicated":
        scen = replace(scenario, layout=replace(layout, weight_mode=WeightMode.REPLICATED,
                                                was_slot_count=None))
    elif mode in (WAS, CAS, "auto"):
        forced = mode
        if mode == "auto":
            cm = CostModel(scenario.stats, scenario.hardware, layout)
            bth = scenario.mode_policy.b_threshold or switch_threshold(cm, layout.dp, s_ctx)
            forced = CAS if batch < bth else WAS
        scen = replace(scenario, layout=replace(layout, weight_mode=WeightMode.SIDP),
                       mode_policy=replace(scenario.mode_policy, mode=forced))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if iterations <= warmup:
        raise ValueError("iterations must exceed warmup")
    rt = GroupRuntime(scen, FixedBatchSource(batch, s_ctx, iterations), threshold_ctx=s_ctx)
    rt.run()
    per_engine = []
    stall = 0.0
    for e in range(rt.d):
        recs = sorted((r for r in rt.records if r.engine == e), key=lambda r: r.iteration)
        per_engine.append((recs[-1].end - recs[warmup - 1].end) / (iterations - warmup))
        stall += sum(r.stall for r in recs[warmup:]) / (iterations - warmup)
    return IterationMeasure(mode, batch, sum(per_engine) / len(per_engine), stall / rt.d,
                            max(rt.net.peak_readers("weight"), default=0))

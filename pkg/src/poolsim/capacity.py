"""Residual-memory arithmetic: how many KV tokens fit next to the weights.

All byte quantities are carried as exact rationals so that the planner is a
pure function of its inputs; only the token counts are floored.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .catalog import LayoutStrategy, ModelStats, Scenario, WeightMode


@dataclass(frozen=True)
class MemoryBreakdown:
    weight_bytes_per_gpu: float
    cache_slot_bytes_per_gpu: float
    activation_reserve_bytes: float
    kv_budget_bytes_per_gpu: float
    kv_tokens_per_gpu: int
    kv_tokens_per_engine: int
    kv_tokens_per_node: int
    feasible: bool
    cas_staging_bytes_per_gpu: float = 0.0


def _weight_footprint(stats: ModelStats, layout: LayoutStrategy) -> Fraction:
    shards = layout.tp * layout.pp
    if layout.shards_ffn:
        # the rank owning the most layers (ceil(L/d)) bounds every engine
        owned = -(-stats.num_layers // layout.dp)
        held = Fraction(stats.non_ffn_weight_bytes) + owned * stats.ffn_bytes_per_layer
        return held / shards
    return Fraction(stats.weight_bytes_total, shards)


def weight_footprint(stats: ModelStats, layout: LayoutStrategy) -> float:
    """Resident weight bytes per GPU, excluding any prefetch or gather buffers."""
    return float(_weight_footprint(stats, layout))


def _slot_bytes(stats: ModelStats, layout: LayoutStrategy) -> Fraction:
    per_layer = Fraction(stats.ffn_bytes_per_layer, layout.tp)
    return layout.was_slot_count * per_layer * Fraction(str(layout.slot_granularity))


def slot_bytes(stats: ModelStats, layout: LayoutStrategy) -> float:
    """Bytes of the weight-streaming slot cache on each GPU."""
    if layout.weight_mode is not WeightMode.SIDP:
        raise ValueError(f"slot_bytes requires weight_mode=sidp, got {layout.weight_mode.value}")
    return float(_slot_bytes(stats, layout))


def cas_staging_bytes(stats: ModelStats, layout: LayoutStrategy, chunk_rows: int = 256) -> float:
    """Activation staging for compute shipping: one buffer per slot, all peers' rows."""
    rows = layout.max_concurrent or chunk_rows
    return float(layout.cas_slot_count * layout.dp * rows * stats.hidden_size * stats.dtype_bytes)


def _buffer_bytes(stats: ModelStats, layout: LayoutStrategy) -> Fraction:
    if layout.weight_mode is WeightMode.SIDP:
        return _slot_bytes(stats, layout)
    if layout.weight_mode is WeightMode.FSDP:
        # double-buffered all-gather target
        return 2 * Fraction(stats.ffn_bytes_per_layer, layout.tp)
    return Fraction(0)


def kv_capacity(scenario: Scenario) -> MemoryBreakdown:
    """KV budget per GPU and token capacity per GPU, per engine and per node.

    Never raises for infeasible layouts; those come back with ``feasible=False``.
    """
    stats = scenario.stats
    layout = scenario.layout
    hw = scenario.hardware
    usable = Fraction(int(hw.hbm_bytes)) * Fraction(str(layout.mem_utilization))
    weights = _weight_footprint(stats, layout)
    buffers = _buffer_bytes(stats, layout)
    reserve = Fraction(str(layout.activation_reserve_bytes))
    budget = max(Fraction(0), usable - weights - buffers - reserve)
    kv_per_token_gpu = Fraction(stats.kv_bytes_per_token, layout.tp * layout.pp)
    tokens_gpu = int(budget // kv_per_token_gpu)
    # every GPU of a TP/PP group holds a slice of the same tokens
    tokens_engine = tokens_gpu
    return MemoryBreakdown(
        weight_bytes_per_gpu=float(weights),
        cache_slot_bytes_per_gpu=float(buffers),
        activation_reserve_bytes=float(reserve),
        kv_budget_bytes_per_gpu=float(budget),
        kv_tokens_per_gpu=tokens_gpu,
        kv_tokens_per_engine=tokens_engine,
        kv_tokens_per_node=tokens_engine * layout.dp,
        feasible=budget > 0,
        cas_staging_bytes_per_gpu=(cas_staging_bytes(stats, layout)
                                   if layout.weight_mode is WeightMode.SIDP else 0.0),
    )


def max_batch(kv_tokens: int, seq_len: int) -> int:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    return max(0, kv_tokens) // seq_len

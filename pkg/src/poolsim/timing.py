"""Roofline cost model for decode iterations, weight fetches and activation shipping.

Within a layer the launch floor, the compute term and the HBM term overlap
(max); layers run back to back (sum); each iteration pays a constant runtime
overhead on top.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .catalog import HardwareSpec, LayoutStrategy, ModelStats

MAX_BATCH = 1 << 20
DEFAULT_CONTEXT = 1024


@dataclass(frozen=True)
class IterCost:
    total_s: float
    compute_s: float
    hbm_s: float
    overhead_s: float


@dataclass(frozen=True)
class CostModel:
    stats: ModelStats
    hw: HardwareSpec
    layout: LayoutStrategy

    @property
    def tp(self) -> int:
        return self.layout.tp

    @property
    def layers_per_stage(self) -> int:
        return math.ceil(self.stats.num_layers / self.layout.pp)

    @property
    def ffn_params_gpu(self) -> float:
        return self.stats.ffn_params_per_layer / self.tp

    @property
    def attn_params_gpu(self) -> float:
        return self.stats.attn_params_per_layer / self.tp

    @property
    def ffn_bytes_gpu(self) -> float:
        return self.stats.ffn_bytes_per_layer / self.tp

    @property
    def launch_ffn(self) -> float:
        return self.hw.kernel_launch_overhead * self.hw.ffn_launch_fraction

    @property
    def launch_attn(self) -> float:
        return self.hw.kernel_launch_overhead * (1.0 - self.hw.ffn_launch_fraction)

    def _attn_terms(self, rows: float, s_ctx: float) -> tuple[float, float]:
        st = self.stats
        flops = (2 * self.attn_params_gpu * rows
                 + 4 * rows * s_ctx * st.num_kv_heads * st.head_dim / self.tp)
        hbm = (self.attn_params_gpu * st.dtype_bytes
               + rows * s_ctx * st.kv_bytes_per_token_per_layer / self.tp
               + rows * st.hidden_size * st.dtype_bytes)
        return flops, hbm

    def _ffn_terms(self, rows: float) -> tuple[float, float]:
        st = self.stats
        flops = 2 * self.ffn_params_gpu * rows
        hbm = self.ffn_bytes_gpu + rows * st.hidden_size * st.dtype_bytes
        return flops, hbm

    def layer_terms(self, rows: float, s_ctx: float) -> tuple[float, float, float]:
        """(launch, compute, hbm) seconds for one whole layer."""
        af, ab = self._attn_terms(rows, s_ctx)
        ff, fb = self._ffn_terms(rows)
        return (self.hw.kernel_launch_overhead,
                (af + ff) / self.hw.compute_rate,
                (ab + fb) / self.hw.hbm_bandwidth)

    def layer_time(self, rows: float, s_ctx: float = 0.0) -> float:
        if rows <= 0:
            return 0.0
        return max(self.layer_terms(rows, s_ctx))

    def attn_time(self, rows: float, s_ctx: float = 0.0) -> float:
        """Attention half of a layer (used when the FFN runs elsewhere)."""
        if rows <= 0:
            return 0.0
        flops, hbm = self._attn_terms(rows, s_ctx)
        return max(self.launch_attn, flops / self.hw.compute_rate, hbm / self.hw.hbm_bandwidth)

    def ffn_time(self, rows: float) -> float:
        return layer_ffn_time(rows, self)

    def tp_sync_time(self) -> float:
        return self.hw.tp_sync_overhead if self.tp > 1 else 0.0


def layer_ffn_time(rows: float, cm: CostModel) -> float:
    """FFN GEMM time for ``rows`` tokens on one GPU; zero rows cost nothing."""
    if rows <= 0:
        return 0.0
    flops = 2 * cm.ffn_params_gpu * rows
    return max(cm.launch_ffn, flops / cm.hw.compute_rate, cm.ffn_bytes_gpu / cm.hw.hbm_bandwidth)


def iter_decode_time(rows: float, s_ctx: float, cm: CostModel) -> IterCost:
    """One decode step over this stage's layers for ``rows`` sequences of mean context ``s_ctx``."""
    if rows < 1:
        raise ValueError("iter_decode_time needs at least one row")
    launch, compute, hbm = cm.layer_terms(rows, s_ctx)
    n = cm.layers_per_stage
    overhead = cm.hw.framework_overhead
    return IterCost(
        total_s=overhead + n * max(launch, compute, hbm),
        compute_s=n * compute,
        hbm_s=n * hbm,
        overhead_s=overhead,
    )


def _first_true(pred, limit: int = MAX_BATCH) -> int:
    """Smallest B in [1, limit] with pred(B); pred must be monotone and pred(limit) true."""
    b = 1
    while b < limit and not pred(b):
        b *= 2
    if b == 1:
        return 1
    lo, hi = b // 2 + 1, min(b, limit)
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def saturation_batch(cm: CostModel, s_ctx: float = DEFAULT_CONTEXT) -> int:
    """B_e: smallest batch whose compute term covers the memory and launch terms.

    Returns ``MAX_BATCH`` when the layer never becomes compute bound.
    """
    def compute_bound(b: int) -> bool:
        launch, compute, hbm = cm.layer_terms(b, s_ctx)
        return compute >= hbm + launch

    if not compute_bound(MAX_BATCH):
        return MAX_BATCH
    return _first_true(compute_bound)


def fetch_time(nbytes: float, link_bw: float, concurrent_readers: int = 1) -> float:
    """Transfer time when the owner's egress is split evenly among readers."""
    if concurrent_readers < 1:
        raise ValueError("concurrent_readers must be >= 1")
    if nbytes <= 0:
        return 0.0
    return nbytes / (link_bw / concurrent_readers)


def non_owner_ffn_bytes(cm: CostModel, d: int) -> float:
    return cm.stats.ffn_bytes_total * (d - 1) / d / cm.tp


def switch_threshold(cm: CostModel, d: int, s_ctx: float = DEFAULT_CONTEXT) -> int:
    """B_th: smallest batch whose decode iteration hides one full non-owner weight fetch."""
    if d < 2:
        raise ValueError("switch_threshold needs d >= 2")
    target = fetch_time(non_owner_ffn_bytes(cm, d), cm.hw.link_bandwidth, 1)

    def hides(b: int) -> bool:
        return iter_decode_time(b, s_ctx, cm).total_s >= target

    if not hides(MAX_BATCH):
        return MAX_BATCH
    return _first_true(hides)


def p2p_time(rows: float, cm: CostModel) -> float:
    """One-way activation transfer for ``rows`` tokens over one link."""
    if rows <= 0:
        return 0.0
    return rows * cm.stats.hidden_size * cm.stats.dtype_bytes / cm.hw.link_bandwidth

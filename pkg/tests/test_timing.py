from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from poolsim.catalog import LayoutStrategy
from poolsim.timing import (MAX_BATCH, CostModel, fetch_time, iter_decode_time, layer_ffn_time,
                            p2p_time, saturation_batch, switch_threshold)

from conftest import make


def cost_model(model="llama-3.1-70b", hw="h20", tp=1, **hw_overrides):
    s = make(model, hw, dp=1, tp=tp)
    return CostModel(s.stats, replace(s.hardware, **hw_overrides), s.layout)


def test_zero_rows_cost_nothing():
    cm = cost_model()
    assert layer_ffn_time(0, cm) == 0.0
    assert p2p_time(0, cm) == 0.0
    assert fetch_time(0, 400e9) == 0.0


def test_ffn_b1_is_hbm_bound():
    # 1.409e9 B / 4e12 B/s
    assert layer_ffn_time(1, cost_model()) == pytest.approx(352e-6, rel=2e-3)


def test_ffn_b2048_is_compute_bound():
    # 2 x 0.7046e9 params x 2048 / 148e12
    assert layer_ffn_time(2048, cost_model()) == pytest.approx(19.5e-3, rel=3e-3)


def test_doubling_below_saturation_is_sublinear():
    cm = cost_model()
    t32, t64 = (iter_decode_time(b, 1024, cm).total_s for b in (32, 64))
    assert t64 / t32 < 2


def test_linear_far_above_saturation():
    cm = cost_model()
    be = saturation_batch(cm)
    for b in (4 * be, 8 * be):
        ratio = layer_ffn_time(2 * b, cm) / layer_ffn_time(b, cm)
        assert ratio == pytest.approx(2.0, rel=0.05)


def test_qwen3_saturation_batch():
    assert 128 <= saturation_batch(cost_model("qwen3-32b", tp=2)) <= 512


def test_saturation_limits():
    assert saturation_batch(cost_model(compute_rate=1e30)) == MAX_BATCH
    assert saturation_batch(cost_model(hbm_bandwidth=1e30, link_bandwidth=1e9,
                                       kernel_launch_overhead=0.0)) == 1


@pytest.mark.parametrize("readers,expected", [(1, 3.52e-3), (7, 24.7e-3)])
def test_fetch_time_fair_share(readers, expected):
    assert fetch_time(1.409e9, 400e9, readers) == pytest.approx(expected, rel=2e-3)


def test_switch_threshold_h20_and_h200():
    assert 64 <= switch_threshold(cost_model(tp=2), 2) <= 256
    assert 128 <= switch_threshold(cost_model(hw="h200", tp=2), 2) <= 512


def test_switch_threshold_free_link():
    assert switch_threshold(cost_model(link_bandwidth=1e30, hbm_bandwidth=1e31), 2) == 1


def test_p2p_time():
    assert p2p_time(32, cost_model()) == pytest.approx(32 * 8192 * 2 / 400e9)
    assert p2p_time(32, cost_model()) == pytest.approx(1.31e-6, rel=1e-2)


def test_p2p_linear_in_hidden():
    cm = cost_model()
    wide = replace(cm, stats=replace(cm.stats, hidden_size=2 * cm.stats.hidden_size))
    assert p2p_time(1, wide) == pytest.approx(2 * p2p_time(1, cm))


def test_fused_pair_beats_two_singles():
    cm = cost_model(tp=2)
    assert layer_ffn_time(2, cm) < 2 * layer_ffn_time(1, cm)


@given(st.integers(1, 4096), st.sampled_from(["llama-3.1-70b", "qwen3-32b"]),
       st.sampled_from(["h20", "h200", "b200"]), st.sampled_from([1, 2, 4, 8]))
def test_iteration_time_monotone(b, model, hw, tp):
    cm = cost_model(model, hw, tp)
    assert iter_decode_time(b + 1, 1024, cm).total_s >= iter_decode_time(b, 1024, cm).total_s


def test_pipeline_splits_layers():
    s = make(dp=1, tp=1)
    cm = CostModel(s.stats, s.hardware, LayoutStrategy(pp=4))
    assert cm.layers_per_stage == 20


def test_no_rows_rejected_for_iterations():
    with pytest.raises(ValueError):
        iter_decode_time(0, 1024, cost_model())

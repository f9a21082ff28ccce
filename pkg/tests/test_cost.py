import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsefreeze.cost import (ACTIVE, FROZEN, PAUSED, NetworkCostModel, epoch_flops, flops_breakdown,
                               layer_bwd_flops, layer_fwd_flops, memory_over_run, memory_snapshot)
from sparsefreeze.dst import scaled_schedule, structure_update
from sparsefreeze.freeze import generate_freeze_config
from sparsefreeze.model import init_random_sparse, keep_count

from oracles import conv_loops, mlp_memory_closed_form


def test_affine_dense_hand_arithmetic():
    net = init_random_sparse("mlp:100-10", 0.0, seed=0)
    layer = net.layers[0]
    assert layer_fwd_flops(layer) == 2 * 100 * 10
    assert layer_bwd_flops(layer) == 4 * 100 * 10
    layer.frozen = True
    assert layer_bwd_flops(layer) == 0
    assert layer_fwd_flops(layer) == 2000


def test_sparse_affine_is_proportional_to_nnz():
    net = init_random_sparse("mlp:100-10", 0.9, seed=0, first_layer_dense=False)
    assert layer_fwd_flops(net.layers[0]) == 2 * keep_count(1000, 0.9) == 200
    assert layer_bwd_flops(net.layers[0]) == 400


def test_conv_flops_match_mac_count_oracle():
    net = init_random_sparse("cnn:2x6x6:3s2:gap-2", 0.5, seed=1, first_layer_dense=False, dtype=np.float64)
    conv = net.layers[0]
    counter = []
    x = np.zeros((1,) + tuple(conv.in_shape))
    conv_loops(x, conv.weights, None, conv.stride, conv.padding, counter)
    assert layer_fwd_flops(conv) == 2 * counter[0]


def test_bwd_to_fwd_ratio_is_two():
    net = init_random_sparse("cnn:3x8x8:4,8s2:gap-5", 0.7, seed=0)
    for layer in net.layers:
        assert layer_bwd_flops(layer) == 2 * layer_fwd_flops(layer)


def test_sieving_scales_linearly():
    net = init_random_sparse("mlp:20-30-20-5", 0.8, seed=0)
    assert epoch_flops(net, 800) * 10 == epoch_flops(net, 1000) * 8
    b = flops_breakdown(net, 800, 1000)
    assert b["actual"] == pytest.approx(0.8 * b["frozen"])


def test_breakdown_telescopes_and_orders():
    net = init_random_sparse("mlp:20-30-20-5", 0.8, seed=0)
    net.blocks[0].layers[0].frozen = True
    b = flops_breakdown(net, 700, 1000)
    assert b["dense"] >= b["sparse"] >= b["frozen"] >= b["actual"]
    saved = (b["dense"] - b["sparse"]) + (b["sparse"] - b["frozen"]) + (b["frozen"] - b["actual"])
    assert saved == b["dense"] - b["actual"]
    assert b["sparse"] - b["frozen"] == 1000 * layer_fwd_flops(net.layers[0]) * 2


def test_activation_memory_hand_arithmetic():
    net = init_random_sparse("mlp:1000-1000", 0.0, seed=0)
    rep = memory_snapshot(net, 64)
    assert rep.activation_grads == 64 * 1000 * 4 == 256000
    assert rep.activations == 2 * 256000       # input plus output
    assert rep.weights == 4 * 10 ** 6


def test_memory_matches_closed_form_for_mlp():
    dims = [784, 256, 128, 10]
    net = init_random_sparse("mlp:784-256-128-10", 0.9, seed=0)
    nnz = [l.nnz for l in net.layers]
    for k in range(3):
        rep = memory_snapshot(net, 64, k)
        assert rep.total == mlp_memory_closed_form(dims, nnz, k, 64)


def test_memory_monotone_in_frozen_prefix():
    net = init_random_sparse("mlp:50-40-30-20-10", 0.8, seed=0)
    totals = [memory_snapshot(net, 32, k).total for k in range(5)]
    assert all(a > b for a, b in zip(totals, totals[1:]))


def test_memory_over_run_ordering():
    net = init_random_sparse("mlp:50-40-30-20-10", 0.8, seed=0)
    model = NetworkCostModel(net, 100)
    base = model.total_flops(np.zeros((20, 4), int))
    plan = generate_freeze_config(model, 0.8 * base, 20, 4, 2)
    run = memory_over_run(net, plan, 32)
    assert run.min_bytes < run.avg_bytes < run.baseline_bytes


def test_planning_model_matches_live_network():
    net = init_random_sparse("mlp:20-30-20-20-5", 0.9, seed=0)
    sch = scaled_schedule(40, 5)
    model = NetworkCostModel(net, 50, sch)
    plan = generate_freeze_config(model, 0.9 * model.total_flops(np.zeros((40, 4), int)), 40, 10, 5)
    from sparsefreeze.freeze import freeze_step
    rng = np.random.default_rng(0)
    series = model.epoch_series(plan.activity_matrix())
    for e in range(40):
        freeze_step(net, e, plan, {})
        structure_update(net, e, sch, rng)
        assert epoch_flops(net, 50) == series[e]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from([ACTIVE, FROZEN]), min_size=4, max_size=4), st.integers(0, 3))
def test_freezing_more_never_costs_more(codes, extra):
    net = init_random_sparse("mlp:20-30-20-20-5", 0.8, seed=0)
    model = NetworkCostModel(net, 10, scaled_schedule(40, 5))
    a = np.tile(codes, (10, 1))
    b = a.copy()
    b[:, extra] = FROZEN
    assert model.total_flops(b) <= model.total_flops(a)
    c = a.copy()
    c[:, extra] = np.where(c[:, extra] == ACTIVE, PAUSED, c[:, extra])
    assert model.total_flops(c) <= model.total_flops(a)

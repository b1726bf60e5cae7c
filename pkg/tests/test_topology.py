import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpcl.config import ARCHITECTURES
from sharpcl.engine import ConfigurationError, MaskedLinear, Network, Optimizer, Tensor
from sharpcl.topology import (
    RankTable,
    UnitState,
    apply_freezing,
    check_path_property,
    compute_activation_stats,
    connection_counts,
    drop_connections,
    edge_direction_ok,
    greedy_select,
    grow_connections,
    init_topology,
    promote_ranks,
    reinit_rank0,
    select_rank1,
    tau_for_phase,
    unit_state,
)


def brute_force_min(values, target):
    if target <= 0:
        return 0
    for k in range(1, len(values) + 1):
        if any(sum(c) >= target for c in itertools.combinations(values, k)):
            return k
    return len(values)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 2**16), min_size=1, max_size=10), st.integers(0, 64))
def test_greedy_matches_brute_force(values, frac):
    # dyadic values keep every partial sum exact
    values = np.array(values) / 1024.0
    target = frac / 64 * values.sum()
    assert len(greedy_select(values, target)) == brute_force_min(values.tolist(), target)


def test_greedy_ties_keep_index_order():
    assert greedy_select(np.array([1.0, 3.0, 3.0, 2.0]), 4.0).tolist() == [1, 2]
    assert greedy_select(np.array([1.0, 2.0]), 0.0).tolist() == []


def test_tau_schedule():
    assert tau_for_phase(0, 0.9) == pytest.approx(0.5 * (1 + math.cos(math.pi / 30)))
    assert tau_for_phase(29, 0.0) == pytest.approx(0.0, abs=1e-12)
    taus = [tau_for_phase(p, 0.5) for p in range(40)]
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    assert min(taus) == 0.5


def test_select_rank1_respects_higher_ranks():
    ranks = RankTable([np.array([5, 5]), np.array([3, 0, 1, 0, 2])], [True, False], 5, 1)
    stats = [np.zeros(0), np.array([10.0, 1.0, 2.0, 5.0, 4.0])]
    # tau * 22 - (10 + 4) = 0.9*22 - 14 = 5.8 -> units 3 (5) and 2 (2) are needed
    selected = select_rank1(stats, ranks, 0.9)
    assert sorted(selected[1].tolist()) == [2, 3]
    assert ranks.ranks[1].tolist() == [3, 0, 1, 1, 2]


def test_select_rank1_when_established_units_suffice():
    ranks = RankTable([np.array([5]), np.array([2, 1, 0])], [True, False], 5, 1)
    select_rank1([np.zeros(0), np.array([9.0, 1.0, 1.0])], ranks, 0.5)
    assert ranks.ranks[1].tolist() == [2, 0, 0]


def test_unit_states():
    assert unit_state(0, False, 1) is UnitState.IDLE
    assert unit_state(1, True, 1) is UnitState.TRAINING
    assert unit_state(2, True, 1) is UnitState.FROZEN
    assert unit_state(2, False, 1) is UnitState.FINE_TUNING
    assert unit_state(3, False, 1) is UnitState.FROZEN
    assert unit_state(3, False, 2) is UnitState.FINE_TUNING
    assert unit_state(2, False, 0) is UnitState.FROZEN


def mnist_topology(seed=0, density=0.4):
    return init_topology(ARCHITECTURES["mnist_cnn"], (1, 28, 28), density, 2, 5, 1, seed)


def test_init_density_exact():
    net, ranks = mnist_topology()
    counts = connection_counts(net)
    assert counts[0] == 16  # first conv stays dense
    for layer, c in zip(net.layers[1:], counts[1:]):
        assert c == round(0.4 * layer.conn_mask.size)
    assert np.all(ranks.ranks[0] == 5)
    assert all(np.all(r == 0) for r in ranks.ranks[1:])


def test_init_rejects_empty_layer():
    arch = [{"kind": "linear", "out": 2}, {"kind": "linear", "out": 2}]
    with pytest.raises(ConfigurationError):
        init_topology(arch, (1, 1, 1), 0.01, 1, 5, 1, 0)


def test_conv_stats_sum_over_feature_map():
    net, _ = mnist_topology()
    probe = np.random.default_rng(0).random((8, 1, 28, 28)).astype(np.float32)
    stats = compute_activation_stats(net, probe, batch=3)
    acts, _ = net.forward(Tensor(probe))
    np.testing.assert_allclose(stats[1], acts[0].data.sum(axis=(0, 2, 3)), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(stats[4], acts[3].data.sum(axis=0), rtol=1e-5, atol=1e-6)
    assert all(np.all(s >= 0) for s in stats[1:])


def random_ranks(net, rng, cap=5):
    ranks = RankTable.fresh(net.unit_counts, net.split, cap, 1)
    for r in ranks.ranks[1:]:
        r[:] = rng.integers(0, 2, size=len(r))
    return ranks


@pytest.mark.parametrize("seed", range(5))
def test_drop_and_grow_preserve_density(seed):
    rng = np.random.default_rng(seed)
    net, _ = mnist_topology(seed)
    net.requires_grad_()
    opt = Optimizer(net.parameters())
    for p in net.parameters():
        opt.state_arrays()[0][net.parameters().index(p)][:] = 1.0
    ranks = random_ranks(net, rng)
    before = connection_counts(net)
    drops = drop_connections(net, ranks, opt)
    assert edge_direction_ok(net, ranks)
    short = grow_connections(net, ranks, drops, rng, opt)
    after = connection_counts(net)
    for b in range(len(before)):
        assert after[b] == before[b] - short[b]
    assert edge_direction_ok(net, ranks)
    assert check_path_property(net, ranks)
    # grown weights start at zero with fresh optimizer state
    for i, layer in enumerate(net.layers):
        dead = ~layer.expand_mask(layer.conn_mask)
        assert np.all(layer.weight.data[dead] == 0)


def test_grow_reports_shortfall():
    rng = np.random.default_rng(0)
    layer = MaskedLinear.create(2, 2, rng)
    net = Network([layer], 1, (2,))
    ranks = RankTable([np.array([3, 3]), np.array([1, 0])], [True, True], 3, 1)
    layer.conn_mask = np.array([[False, False], [True, False]])
    assert grow_connections(net, ranks, [3], rng) == [2]
    assert layer.conn_mask.tolist() == [[False, False], [True, True]]


def linear_chain(widths, masks, ranks):
    rng = np.random.default_rng(0)
    layers = []
    for (a, b), m in zip(zip(widths, widths[1:]), masks):
        layer = MaskedLinear.create(a, b, rng)
        layer.conn_mask = np.array(m, bool)
        layers.append(layer)
    net = Network(layers, 1, (widths[0],))
    table = RankTable([np.array(r) for r in ranks], [True] + [False] * (len(widths) - 1), 9, 1)
    return net, table


def test_path_checker_finds_multi_hop_violation():
    # unit (1, 1) has rank 1 and feeds a rank-3 unit: violation
    net, ranks = linear_chain(
        [1, 2, 1],
        [[[1], [1]], [[1, 1]]],
        [[9], [3, 1], [3]],
    )
    res = check_path_property(net, ranks)
    assert not res
    assert res.path[0][2] == 1 and res.path[-1] == (2, 0, 3)
    net.layers[1].conn_mask = np.array([[True, False]])
    assert check_path_property(net, ranks)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_path_checker_agrees_with_pairwise_closure(seed):
    rng = np.random.default_rng(seed)
    widths = [2, 3, 3, 2]
    masks = [rng.random((b, a)) < 0.5 for a, b in zip(widths, widths[1:])]
    ranks = [[9, 9]] + [rng.integers(0, 4, size=w).tolist() for w in widths[1:]]
    net, table = linear_chain(widths, masks, ranks)
    # reference: reachability by repeated boolean products
    violation = False
    flat_rank = [r for layer in ranks for r in layer]
    offsets = np.cumsum([0] + widths)
    n = offsets[-1]
    adj = np.zeros((n, n), bool)
    for b, m in enumerate(masks):
        adj[offsets[b] : offsets[b + 1], offsets[b + 1] : offsets[b + 2]] = m.T
    reach = adj.copy()
    for _ in range(len(widths)):
        reach |= (reach.astype(int) @ adj.astype(int)) > 0
    for i, j in zip(*np.nonzero(reach)):
        if flat_rank[i] < flat_rank[j]:
            violation = True
    assert bool(check_path_property(net, table)) == (not violation)


def test_promote_caps_at_max():
    ranks = RankTable([np.array([3]), np.array([0, 1, 2, 3])], [True, False], 3, 1)
    promote_ranks(ranks)
    assert ranks.ranks[1].tolist() == [0, 2, 3, 3]
    assert ranks.ranks[0].tolist() == [3]


def test_freezing_rules_and_monotonicity():
    net, ranks = mnist_topology()
    ranks.ranks[1][:4] = [1, 2, 3, 0]
    ranks.ranks[3][:4] = [1, 2, 3, 0]
    frozen = apply_freezing(net, ranks)
    assert frozen[0][:4].tolist() == [False, True, True, False]  # G: rank > 1
    assert frozen[2][:4].tolist() == [False, False, True, False]  # F, m=1: rank > 2
    assert net.layers[2].freeze_mask[2].all() and not net.layers[2].freeze_mask[1].any()
    ranks.ranks[3][2] = 0
    apply_freezing(net, ranks)
    assert net.layers[2].freeze_mask[2].all() and net.layers[2].bias_freeze[2]


def test_reinit_rank0_skips_frozen_and_keeps_masks():
    net, ranks = mnist_topology()
    ranks.ranks[4][:] = 2
    ranks.ranks[4][:10] = 0
    masks = [l.conn_mask.copy() for l in net.layers]
    w_before = net.layers[3].weight.data.copy()
    n = reinit_rank0(net, ranks, np.random.default_rng(1))
    assert n == sum(int((r == 0).sum()) for r in ranks.ranks[1:])
    assert all(np.array_equal(m, l.conn_mask) for m, l in zip(masks, net.layers))
    np.testing.assert_array_equal(net.layers[3].weight.data[10:], w_before[10:])
    assert not np.array_equal(net.layers[3].weight.data[:10], w_before[:10])

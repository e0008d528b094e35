import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbc import numcore as nc
from mbc.aggregator import (AggregationStats, AggregatorConfig, EmptyMemoryError, aggregate, aggregate_rows,
                            canonical_order, hierarchical_aggregate, init_aggregator)
from mbc.numcore import Tensor

CFG = AggregatorConfig(dim=8, tokens=3, num_blocks=4, num_heads=2, group_size=4)


@pytest.fixture(scope="module")
def psi():
    return init_aggregator(CFG, np.random.default_rng(0))


def entries(n, seed=0):
    r = np.random.default_rng(seed)
    return [r.normal(size=(3, 8)) for _ in range(n)]


def query(seed=9, length=5):
    return np.random.default_rng(seed).normal(size=(length, 8))


def test_output_shape(psi):
    assert aggregate(query(), entries(3), psi, CFG).values.shape == (3, 8)


def test_empty_bank_errors(psi):
    with pytest.raises(EmptyMemoryError, match="no memorized documents"):
        aggregate(query(), [], psi, CFG)
    with pytest.raises(EmptyMemoryError):
        hierarchical_aggregate(query(), [], psi, CFG)


def test_entry_shape_checked(psi):
    with pytest.raises(ValueError):
        aggregate(query(), [np.zeros((2, 8))], psi, CFG)


def test_permutation_invariance_bit_exact(psi):
    es = entries(16)
    ref = aggregate(query(), es, psi, CFG).values.data
    r = np.random.default_rng(1)
    for _ in range(100):
        perm = r.permutation(16)
        out = aggregate(query(), [es[i] for i in perm], psi, CFG).values.data
        assert np.array_equal(out, ref)


def test_duplicates_are_a_no_op(psi):
    e = entries(1)
    a = aggregate(query(), e, psi, CFG).values.data
    b = aggregate(query(), e + e, psi, CFG).values.data
    assert np.abs(a - b).max() < 1e-9


def test_zeroed_last_projection_replays_shorter_stack(psi):
    import copy
    p = copy.deepcopy(psi)
    p["agg.block3.wo"].data = np.zeros((8, 8))
    short = AggregatorConfig(dim=8, tokens=3, num_blocks=3, num_heads=2)
    e = entries(1)
    assert np.array_equal(aggregate(query(), e, p, CFG).values.data, aggregate(query(), e, p, short).values.data)


@given(st.integers(1, 8), st.integers(0, 1000))
def test_hierarchical_with_large_group_equals_flat(psi, n, seed):
    es = entries(n, seed)
    flat = aggregate(query(), es, psi, CFG).values.data
    for m in (n, n + 3):
        assert np.array_equal(hierarchical_aggregate(query(), es, psi, CFG, m).values.data, flat)


def test_single_entry_any_group(psi):
    es = entries(1)
    flat = aggregate(query(), es, psi, CFG).values.data
    assert np.array_equal(hierarchical_aggregate(query(), es, psi, CFG, 1).values.data, flat)


def test_staged_replay_n4_m2(psi):
    es = entries(4, seed=3)
    order = canonical_order(es)
    s = [es[i] for i in order]
    g1 = aggregate(query(), s[:2], psi, CFG).values.data
    g2 = aggregate(query(), s[2:], psi, CFG).values.data
    staged = aggregate(query(), [g1, g2], psi, CFG).values.data
    assert np.array_equal(hierarchical_aggregate(query(), es, psi, CFG, 2).values.data, staged)


def test_group_size_one_cannot_combine(psi):
    with pytest.raises(ValueError):
        hierarchical_aggregate(query(), entries(2), psi, CFG, 1)
    with pytest.raises(ValueError):
        hierarchical_aggregate(query(), entries(2), psi, CFG, 0)


@given(st.integers(2, 40), st.integers(2, 5))
def test_working_set_bounded(psi, n, m):
    stats = AggregationStats()
    out = hierarchical_aggregate(query(), entries(n, n), psi, CFG, m, stats).values.data
    assert np.isfinite(out).all() and out.shape == (3, 8)
    assert stats.peak_entry_rows <= m * CFG.tokens


def test_hierarchical_is_permutation_invariant(psi):
    es = entries(11, seed=4)
    ref = hierarchical_aggregate(query(), es, psi, CFG, 3).values.data
    perm = np.random.default_rng(0).permutation(11)
    assert np.array_equal(hierarchical_aggregate(query(), [es[i] for i in perm], psi, CFG, 3).values.data, ref)


def test_gradients_match_fd():
    cfg = AggregatorConfig(dim=4, tokens=2, num_blocks=3, num_heads=2)
    r = np.random.default_rng(2)
    p = init_aggregator(cfg, r)
    for name, t in p:  # move norms off their identity init
        if "ln_" in name:
            t.data = t.data + r.normal(scale=0.3, size=t.shape)
    rows = Tensor(r.normal(size=(6, 4)), requires_grad=True)
    q = Tensor(r.normal(size=(2, 3, 4)), requires_grad=True)
    valid = np.array([[True, True, True], [True, True, False]])
    target = r.normal(size=(2, 2, 4))
    loss = lambda: nc.sum_(aggregate_rows(q, valid, rows, p, cfg) * target)
    assert nc.check_gradients(loss, [rows, q] + [t for _, t in p]) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        AggregatorConfig(num_blocks=1)
    with pytest.raises(ValueError):
        AggregatorConfig(dim=6, num_heads=4)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbc import numcore as nc
from mbc.codebook import (Codebook, codebook_perplexity, init_codebook, lookup, nearest_codes, quantize_ste,
                          reset_dead_codes, update_usage, usage_histogram, vq_loss)
from mbc.numcore import Tensor


def book(E, usage=None, **kw):
    E = np.asarray(E, dtype=float)
    u = np.zeros(len(E)) if usage is None else np.asarray(usage, dtype=float)
    return Codebook(Tensor(E, requires_grad=True, name="codebook.E"), u, **kw)


def brute_force(phi, E):
    out = []
    for row in phi:
        d = [float(((row - e) ** 2).sum()) for e in E]
        out.append(min(range(len(E)), key=lambda j: (d[j], j)))
    return np.array(out)


def test_init_bounds_zero_usage_and_determinism():
    cb = init_codebook(512, 16, seed=3)
    assert np.abs(cb.E.data).max() <= 1 / 512
    assert not cb.usage.any()
    assert np.array_equal(cb.E.data, init_codebook(512, 16, seed=3).E.data)
    with pytest.raises(ValueError):
        init_codebook(1, 4)


def test_nearest_examples():
    cb = book([[0, 0], [1, 1]])
    assert nearest_codes(np.array([[0.9, 0.8]]), cb).tolist() == [1]
    assert nearest_codes(np.array([[1.0, 1.0]]), cb).tolist() == [1]
    assert nearest_codes(np.array([[0.5, 0.5]]), cb).tolist() == [0]


def test_nearest_dimension_mismatch():
    with pytest.raises(ValueError):
        nearest_codes(np.zeros((2, 3)), book(np.zeros((4, 2))))


@given(st.integers(1, 8), st.integers(2, 32), st.integers(1, 8), st.integers(0, 2**31))
def test_nearest_matches_brute_force(t, n, d, seed):
    r = np.random.default_rng(seed)
    E = r.normal(size=(n, d))
    phi = r.normal(size=(t, d))
    if seed % 3 == 0:  # exact hits and duplicate codes exercise tie-breaking
        E[r.integers(n)] = E[0]
        phi[0] = E[0]
    assert np.array_equal(nearest_codes(phi, book(E)), brute_force(phi, E))


def test_batched_phi_gets_codes_per_row():
    cb = book(np.eye(3))
    phi = np.array([[[1, 0, 0], [0, 0, 1]], [[0, 1, 0], [0, 0, 0.9]]], dtype=float)
    assert nearest_codes(phi, cb).tolist() == [[0, 2], [1, 2]]


def test_ste_forward_exact_and_gradients():
    cb = init_codebook(8, 3, seed=0)
    phi = Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
    q = quantize_ste(phi, cb)
    assert np.array_equal(q.ste.data, q.hard.data)
    assert np.array_equal(q.hard.data, cb.E.data[q.codes])
    nc.backward(nc.sum_(q.ste))
    assert np.array_equal(phi.grad, np.ones((4, 3)))
    assert cb.E.grad is None or not cb.E.grad.any()


def test_ste_square_gradient_matches_fd_of_frozen_surrogate():
    cb = init_codebook(8, 3, seed=0)
    x0 = np.random.default_rng(2).normal(size=(4, 3)) * 0.01
    phi = Tensor(x0.copy(), requires_grad=True)
    q = quantize_ste(phi, cb)
    nc.backward(nc.sum_(q.ste * q.ste))
    # with codes frozen the straight-through value is x plus a constant offset
    offset = q.hard.data - x0
    fd = nc.finite_difference_gradient(lambda x: float(((x + offset) ** 2).sum()), x0)
    assert nc.relative_error(phi.grad, fd) < 1e-8
    assert np.allclose(phi.grad, 2 * cb.E.data[q.codes])


def test_vq_loss_values():
    phi, hard = Tensor(np.array([[1.0, 0.0]])), Tensor(np.zeros((1, 2)))
    assert float(vq_loss(phi, hard, 0.25).data) == pytest.approx(1.25)
    assert float(vq_loss(hard, hard, 0.25).data) == 0.0
    with pytest.raises(ValueError):
        vq_loss(phi, Tensor(np.zeros((2, 2))))


def test_vq_loss_gradient_split():
    cb = init_codebook(6, 2, seed=4)
    x0 = np.random.default_rng(5).normal(size=(3, 2))
    phi = Tensor(x0.copy(), requires_grad=True)
    q = quantize_ste(phi, cb)
    nc.backward(vq_loss(phi, q.hard, 0.25))
    expected_E = np.zeros_like(cb.E.data)
    np.add.at(expected_E, q.codes, 2 * (cb.E.data[q.codes] - x0))
    assert np.allclose(cb.E.grad, expected_E)
    assert np.allclose(phi.grad, 0.25 * 2 * (x0 - cb.E.data[q.codes]))

    codes = q.codes.copy()

    def f(E):
        return float(((x0 - E[codes]) ** 2).sum())
    assert nc.relative_error(cb.E.grad, nc.finite_difference_gradient(f, cb.E.data.copy())) < 1e-6


def test_usage_update_ema():
    cb = book(np.zeros((3, 1)), usage=[0.0, 1.0, 0.5])
    update_usage(cb, np.array([[0, 0], [2, 2]]))
    assert cb.usage == pytest.approx([0.02, 0.99, 0.495 + 0.02])


def test_reset_nothing_dead():
    cb = book(np.eye(2), usage=[1.0, 1.0])
    rep = reset_dead_codes(cb, np.ones((3, 2)), np.random.default_rng(0))
    assert rep.indices == []
    assert np.array_equal(cb.E.data, np.eye(2))


def test_reset_one_dead_code():
    E = np.array([[0.0, 0], [5, 5], [9, 9]])
    cb = book(E, usage=[0.5, 1e-6, 0.7])
    batch = np.array([[1.0, 2], [3, 4], [5, 6]])
    rep = reset_dead_codes(cb, batch, np.random.default_rng(0))
    assert rep.indices == [1]
    assert any(np.array_equal(cb.E.data[1], r) for r in batch)
    assert cb.usage[1] == pytest.approx(np.mean([0.5, 1e-6, 0.7]))
    assert np.array_equal(cb.E.data[[0, 2]], E[[0, 2]])


def test_reset_caps_at_distinct_batch_rows():
    cb = book(np.zeros((10, 2)))
    batch = np.array([[1.0, 1], [2, 2], [1, 1]])
    rep = reset_dead_codes(cb, batch, np.random.default_rng(0))
    assert len(rep.indices) == 2
    assert len({tuple(r) for r in cb.E.data[rep.indices]}) == 2


def test_reset_empty_batch_warns():
    cb = book(np.zeros((3, 2)))
    rep = reset_dead_codes(cb, np.zeros((0, 2)), np.random.default_rng(0))
    assert rep.indices == [] and rep.warning


@given(st.integers(0, 2**31))
def test_reset_never_touches_live_codes(seed):
    r = np.random.default_rng(seed)
    E = r.normal(size=(12, 3))
    u = np.where(r.random(12) < 0.5, 0.0, r.random(12) + 1e-4)
    cb = book(E.copy(), usage=u.copy())
    rep = reset_dead_codes(cb, r.normal(size=(5, 3)), r)
    live = u >= 1e-4
    assert np.array_equal(cb.E.data[live], E[live])
    assert set(rep.indices) <= set(np.flatnonzero(~live))
    assert len({tuple(x) for x in cb.E.data[rep.indices]}) == len(rep.indices)


def test_perplexity_examples():
    assert codebook_perplexity(np.ones(512)) == pytest.approx(512)
    assert codebook_perplexity(np.array([0, 0, 3.0])) == 1.0
    assert codebook_perplexity(np.array([1.0, 1, 2])) == pytest.approx(2.8284, abs=1e-4)
    with pytest.raises(ValueError):
        codebook_perplexity(np.zeros(4))


@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=64).filter(lambda u: sum(u) > 0))
def test_perplexity_bounds(u):
    p = codebook_perplexity(np.array(u))
    assert 1.0 <= p <= len(u)


def test_perplexity_grows_toward_uniform():
    u = np.array([10.0, 1, 0.1, 0.01])
    ppl = [codebook_perplexity((1 - a) * u + a * u.mean()) for a in np.linspace(0, 1, 11)]
    assert all(b >= a - 1e-12 for a, b in zip(ppl, ppl[1:]))


def test_collapse_without_reset_and_recovery_with_reset():
    def run(reset):
        cb = init_codebook(16, 2, seed=0)
        r = np.random.default_rng(0)
        for _ in range(600):
            vecs = np.tile([[0.3, -0.2]], (4, 1)) if not reset else r.normal(size=(4, 2))
            update_usage(cb, nearest_codes(vecs, cb))
            if reset:
                reset_dead_codes(cb, vecs, r)
        return codebook_perplexity(cb)
    assert run(False) == pytest.approx(1.0)
    assert run(True) > 2.0


def test_lookup_reproduces_hard():
    cb = init_codebook(8, 3, seed=1)
    q = quantize_ste(Tensor(np.random.default_rng(0).normal(size=(5, 3))), cb)
    assert np.array_equal(lookup(cb, q.codes).data, q.hard.data)


def test_histogram_counts_all_codes():
    cb = book(np.zeros((5, 1)), usage=[0, 0, 1, 2, 3])
    assert sum(usage_histogram(cb, bins=3)["counts"]) == 5

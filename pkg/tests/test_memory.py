import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsfm import tensor as T
from gsfm.memory import (MemoryBank, ReadConfig, affinity, memorize, memory_read, readout, should_memorize,
                         topk_mask, topk_normalize)
from gsfm.tensor import Tensor


def test_affinity_matches_brute_force(rng):
    kq, km = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    a = affinity(Tensor(kq), Tensor(km)).data
    for i in range(3):
        for j in range(5):
            assert abs(a[i, j] + ((kq[:, i] - km[:, j]) ** 2).sum()) < 1e-12


def test_topk_example_pair():
    out = topk_normalize(Tensor(np.array([[0.0, 0.0, -100.0]])), 2).data
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-15)


def test_topk_one_ties_lowest_index():
    out = topk_normalize(Tensor(np.array([[1.0, 3.0, 3.0, 0.0]])), 1).data
    np.testing.assert_array_equal(out, [[0.0, 1.0, 0.0, 0.0]])


def test_topk_mask_tie_rule():
    m = topk_mask(np.array([[2.0, 1.0, 1.0, 1.0, 0.0]]), 3)
    assert m.tolist() == [[True, True, True, False, False]]


def test_readout_brute_force(rng):
    w = topk_normalize(Tensor(rng.normal(size=(3, 5))), 5).data
    vm = rng.normal(size=(2, 5))
    out = readout(Tensor(w), Tensor(vm)).data
    ref = np.zeros((2, 3))
    for i in range(3):
        for j in range(5):
            ref[:, i] += w[i, j] * vm[:, j]
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_single_entry_returns_value(rng):
    v = rng.normal(size=(3, 1))
    out = memory_read(Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 1))), Tensor(v), 50).data
    np.testing.assert_array_equal(out, np.repeat(v, 6, axis=1))


def test_identical_keys_average_values(rng):
    k = rng.normal(size=(4, 1))
    vm = rng.normal(size=(2, 2))
    out = memory_read(Tensor(rng.normal(size=(4, 3))), Tensor(np.hstack([k, k])), Tensor(vm), 50).data
    np.testing.assert_allclose(out, np.repeat(vm.mean(axis=1, keepdims=True), 3, axis=1), atol=1e-12)


def test_top_k_clamped_to_memory_size(rng):
    kq, km, vm = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    a = memory_read(Tensor(kq), Tensor(km), Tensor(vm), 50).data
    b = memory_read(Tensor(kq), Tensor(km), Tensor(vm), 2).data
    np.testing.assert_array_equal(a, b)


def test_schedule_r3_eight_frames():
    bank = MemoryBank()
    for f in range(8):
        memorize(bank, f, Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))), 3, flatten=False)
    assert bank.frame_indices == [0, 3, 6]


def test_schedule_r1_all():
    assert [f for f in range(5) if should_memorize(f, 1)] == [0, 1, 2, 3, 4]


def test_capacity_fifo_keeps_first():
    bank = MemoryBank(capacity=2)
    for f in range(8):
        memorize(bank, f, Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))), 3, flatten=False)
    assert bank.frame_indices == [0, 6]


def test_memorize_flattens_spatial(rng):
    bank = memorize(MemoryBank(), 0, Tensor(rng.normal(size=(4, 2, 3))), Tensor(rng.normal(size=(5, 2, 3))), 3)
    assert bank.keys.shape == (4, 6) and bank.values.shape == (5, 6)


def test_duplicate_frame_rejected():
    bank = MemoryBank()
    memorize(bank, 0, Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), 3, flatten=False)
    with pytest.raises(ValueError):
        memorize(bank, 0, Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), 3, flatten=False)


def test_empty_bank_has_no_keys():
    with pytest.raises(ValueError):
        MemoryBank().keys


def test_read_config_validation():
    with pytest.raises(ValueError):
        ReadConfig(top_k=0)


def test_end_to_end_grad(rng):
    km, vm = rng.normal(size=(2, 4, 9)), rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(2, 3, 5))
    f = lambda q: T.tsum(memory_read(q, Tensor(km), Tensor(vm), 4) * w)
    assert T.grad_check(f, rng.normal(size=(2, 4, 5)), h=1e-5) < 1e-3


def test_grad_only_through_kept_entries():
    a = Tensor(np.array([[3.0, 2.0, -5.0, 1.0]]), requires_grad=True)
    T.tsum(topk_normalize(a, 2) * np.array([[1.0, 2.0, 3.0, 4.0]])).backward()
    assert a.grad[0, 2] == 0.0 and a.grad[0, 3] == 0.0


seeds = st.integers(0, 2 ** 32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 8))
def test_topk_full_equals_softmax(seed, m, n):
    a = Tensor(np.random.default_rng(seed).normal(size=(m, n)) * 5)
    np.testing.assert_allclose(topk_normalize(a, n).data, T.softmax(a, axis=-1).data, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 8), st.integers(1, 8))
def test_topk_rows_sum_to_one_with_k_nonzeros(seed, n, k):
    a = np.random.default_rng(seed).normal(size=(3, n))
    w = topk_normalize(Tensor(a), k).data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert ((w > 0).sum(axis=-1) <= min(k, n)).all()


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 6))
def test_readout_is_convex(seed, m, n):
    r = np.random.default_rng(seed)
    vm = r.normal(size=(3, n))
    out = memory_read(Tensor(r.normal(size=(2, m))), Tensor(r.normal(size=(2, n))), Tensor(vm), 3).data
    assert (out >= vm.min(axis=1, keepdims=True) - 1e-12).all()
    assert (out <= vm.max(axis=1, keepdims=True) + 1e-12).all()


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_affinity_translation_invariant(seed):
    r = np.random.default_rng(seed)
    kq, km, c = r.normal(size=(4, 3)), r.normal(size=(4, 5)), r.normal(size=(4, 1)) * 3
    a = affinity(Tensor(kq), Tensor(km)).data
    b = affinity(Tensor(kq + c), Tensor(km + c)).data
    assert np.abs(a - b).max() < 1e-5

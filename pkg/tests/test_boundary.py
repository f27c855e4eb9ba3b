import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsfm import tensor as T
from gsfm.boundary import (FusionBlock, bce_with_logits, bootstrapped_ce, boundary_loss, dice_loss,
                           keep_fraction_schedule, laplacian_boundary, pixel_cross_entropy)
from gsfm.tensor import Tensor


def brute_laplacian(m):
    h, w = m.shape
    out = np.zeros_like(m)
    at = lambda i, j: m[min(max(i, 0), h - 1), min(max(j, 0), w - 1)]
    for i in range(h):
        for j in range(w):
            out[i, j] = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4 * m[i, j]
    return out


def test_empty_and_full_masks_have_no_boundary():
    assert laplacian_boundary(np.zeros((5, 5))).sum() == 0
    assert laplacian_boundary(np.ones((5, 5))).sum() == 0


def test_square_ring_matches_brute_force():
    m = np.zeros((7, 7))
    m[2:5, 2:5] = 1
    expected = (np.abs(brute_laplacian(m)) > 0.1).astype(float)
    np.testing.assert_array_equal(laplacian_boundary(m), expected)
    # the 3x3 square: all 9 inside pixels except the centre, plus the 12 4-neighbours outside
    assert expected.sum() == 8 + 12
    assert expected[3, 3] == 0


def test_boundary_binary_and_batched(rng):
    m = (rng.random((2, 1, 9, 9)) > 0.5).astype(float)
    b = laplacian_boundary(m)
    assert set(np.unique(b)) <= {0.0, 1.0}
    np.testing.assert_array_equal(b[1, 0], laplacian_boundary(m[1, 0]))


def test_soft_mask_threshold():
    m = np.zeros((3, 3))
    m[1, 1] = 0.02          # response 0.08 at centre, 0.02 at neighbours
    assert laplacian_boundary(m).sum() == 0
    m[1, 1] = 0.03
    assert laplacian_boundary(m).sum() == 1


def test_dice_identities():
    assert dice_loss(Tensor(np.ones(4)), np.ones(4), eps=0.0).item() == 0.0
    assert dice_loss(Tensor(np.array([1.0, 0.0])), np.array([0.0, 1.0]), eps=0.0).item() == 1.0
    assert abs(dice_loss(Tensor(np.array([1.0, 0.0])), np.array([1.0, 1.0]), eps=0.0).item() - 1 / 3) < 1e-15


def test_dice_eps_limit():
    vals = [dice_loss(Tensor(np.ones(4)), np.ones(4), eps=e).item() for e in (1e-2, 1e-5, 1e-8)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_dice_all_zero_is_one():
    assert dice_loss(Tensor(np.zeros(4)), np.zeros(4)).item() == 1.0


def test_bce_matches_naive(rng):
    x = rng.normal(size=(3, 4)) * 3
    q = (rng.random((3, 4)) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-x))
    ref = -(q * np.log(p) + (1 - q) * np.log(1 - p)).mean()
    assert abs(bce_with_logits(Tensor(x), q).item() - ref) < 1e-12


def test_bce_no_overflow():
    v = bce_with_logits(Tensor(np.array([1000.0, -1000.0])), np.array([1.0, 0.0])).item()
    assert v == 0.0


def test_boundary_loss_shape_check():
    with pytest.raises(ValueError):
        boundary_loss(Tensor(np.zeros((1, 4, 4))), np.zeros((1, 4, 5)))


def test_cross_entropy_matches_manual(rng):
    logits = rng.normal(size=(2, 3, 3))
    labels = rng.integers(0, 2, (3, 3))
    ce = pixel_cross_entropy(Tensor(logits), labels).data
    for i in range(3):
        for j in range(3):
            z = logits[:, i, j]
            ref = -z[labels[i, j]] + math.log(np.exp(z).sum())
            assert abs(ce[i, j] - ref) < 1e-12


def test_bootstrap_keep_one_is_mean(rng):
    logits = Tensor(rng.normal(size=(2, 2, 5, 5)))
    labels = rng.integers(0, 2, (2, 5, 5))
    assert abs(bootstrapped_ce(logits, labels, 1.0).item() - T.mean(pixel_cross_entropy(logits, labels)).item()) < 1e-7


def test_bootstrap_keeps_hardest():
    logits = Tensor(np.zeros((2, 1, 4)))
    logits.data[1, 0] = [4.0, 1.0, -1.0, -3.0]    # class-1 logits
    labels = np.ones((1, 4), dtype=int)
    per = pixel_cross_entropy(logits, labels).data.ravel()
    hard = np.sort(per)[-2:].mean()
    assert abs(bootstrapped_ce(logits, labels, 0.5).item() - hard) < 1e-12


def test_bootstrap_rejects_bad_fraction():
    with pytest.raises(ValueError):
        bootstrapped_ce(Tensor(np.zeros((2, 2, 2))), np.zeros((2, 2), int), 0.0)


def test_keep_schedule():
    assert keep_fraction_schedule(0, 100) == 1.0
    assert keep_fraction_schedule(25, 100) == pytest.approx(0.2)
    assert keep_fraction_schedule(99, 100) == pytest.approx(0.2)
    assert keep_fraction_schedule(10, 100) == pytest.approx(1.0 - 0.8 * 10 / 25)


def test_fusion_is_residual(rng):
    fb = FusionBlock(3, np.random.default_rng(0))
    src, dst = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
    out = fb(src, dst).data
    proj = np.einsum("oc,chw->ohw", fb.proj.weight.data[:, :, 0, 0], src.data)
    np.testing.assert_allclose(out, np.maximum(proj, 0) + dst.data, atol=1e-12)
    with pytest.raises(ValueError):
        fb(src, Tensor(np.zeros((3, 4, 5))))


@pytest.mark.parametrize("fn", ["dice", "bce", "boundary", "bootstrap", "fusion"])
def test_loss_grads(fn, rng):
    q = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
    labels = rng.integers(0, 2, (2, 5, 5))
    fb = FusionBlock(2, np.random.default_rng(1))
    dst = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(2, 5, 5))
    cases = {
        "dice": (lambda x: dice_loss(T.sigmoid(x), q), (2, 1, 5, 5)),
        "bce": (lambda x: bce_with_logits(x, q), (2, 1, 5, 5)),
        "boundary": (lambda x: boundary_loss(x, q), (2, 1, 5, 5)),
        "bootstrap": (lambda x: bootstrapped_ce(x, labels, 0.4), (2, 2, 5, 5)),
        "fusion": (lambda x: T.tsum(fb(x, Tensor(dst)) * w), (2, 5, 5)),
    }
    f, shape = cases[fn]
    assert T.grad_check(f, rng.normal(size=shape), h=1e-5) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 12), st.integers(3, 12))
def test_boundary_values_binary_and_inside_support(seed, h, w):
    m = (np.random.default_rng(seed).random((h, w)) > 0.6).astype(float)
    b = laplacian_boundary(m)
    assert set(np.unique(b)) <= {0.0, 1.0}
    # every boundary pixel touches a label change
    from scipy import ndimage
    changes = ndimage.maximum_filter(m, footprint=[[0, 1, 0], [1, 1, 1], [0, 1, 0]], mode="nearest") != \
        ndimage.minimum_filter(m, footprint=[[0, 1, 0], [1, 1, 1], [0, 1, 0]], mode="nearest")
    assert not (b.astype(bool) & ~changes).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dice_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    v = dice_loss(Tensor(r.random(10)), (r.random(10) > 0.5).astype(float)).item()
    assert 0.0 <= v <= 1.0
